"""Credit ledger, two-phase coin redemption, and the conservation oracle."""

import random
import threading
import time

import pytest

from qrowd.devices import DeviceUnreachable, DispenserClient, StubDispenser
from qrowd.errors import QrowdError
from qrowd.fabric import Envelope
from qrowd.services.rewards import LEDGER, REDEMPTIONS, RewardService, fold_balances


def award_event(user="u1", task="t1", amount=20):
    payload = {"userId": user, "taskId": task, "responseId": "r1", "rewardAmount": amount}
    return payload, Envelope(route="esm.completed", payload=payload, kind="event")


def wait_for_state(reward, redemption_id, state, timeout=3.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        out = reward.op_get_redemption({"redemptionId": redemption_id})
        if out["state"] == state:
            return out
        time.sleep(0.01)
    raise AssertionError(f"redemption never reached {state}: {out}")


@pytest.fixture
def stub():
    server = StubDispenser().start()
    yield server
    server.stop()


def make_reward(data, config, stub=None, sink=None, **client_kw):
    device = None
    if stub is not None:
        device = DispenserClient(
            "127.0.0.1", stub.port,
            ack_timeout_s=client_kw.pop("ack_timeout_s", config.device_ack_timeout_s),
            done_timeout_s=client_kw.pop("done_timeout_s", config.redemption_timeout_s),
        )
    svc = RewardService(data, config, device=device)
    if sink is not None:
        svc.attach(sink)
    return svc


class TestFoldBalances:
    def test_awards_accumulate(self):
        entries = [
            {"entryId": "1", "userId": "u1", "kind": "award", "amount": 10, "refId": "t1", "at": 1},
            {"entryId": "2", "userId": "u1", "kind": "award", "amount": 5, "refId": "t2", "at": 2},
            {"entryId": "3", "userId": "u2", "kind": "award", "amount": 7, "refId": "t1", "at": 3},
        ]
        assert fold_balances(entries, {}) == {"u1": 15, "u2": 7}

    @pytest.mark.parametrize("state,expected", [
        ("dispensing", 5), ("dispensed", 5), ("failed", 10), ("refunded", 10),
    ])
    def test_redemption_counts_only_in_effective_states(self, state, expected):
        entries = [
            {"entryId": "1", "userId": "u1", "kind": "award", "amount": 10, "refId": "t1", "at": 1},
            {"entryId": "2", "userId": "u1", "kind": "redemption", "amount": 5, "refId": "r1", "at": 2},
        ]
        redemptions = {"r1": {"state": state}}
        assert fold_balances(entries, redemptions)["u1"] == expected

    def test_dangling_redemption_ref_ignored(self):
        entries = [
            {"entryId": "1", "userId": "u1", "kind": "award", "amount": 10, "refId": "t1", "at": 1},
            {"entryId": "2", "userId": "u1", "kind": "redemption", "amount": 5, "refId": "gone", "at": 2},
        ]
        assert fold_balances(entries, {})["u1"] == 10


class TestAwards:
    def test_award_credits_and_publish(self, data, config, sink):
        reward = make_reward(data, config, sink=sink)
        reward.on_esm_completed(*award_event(amount=20))
        assert reward.op_balance({"userId": "u1"})["balance"] == 20
        events = sink.payloads("credit.awarded")
        assert len(events) == 1 and events[0]["amount"] == 20

    def test_duplicate_event_awards_once(self, data, config, sink):
        reward = make_reward(data, config, sink=sink)
        payload, env = award_event()
        reward.on_esm_completed(payload, env)
        reward.on_esm_completed(payload, env)
        assert reward.op_balance({"userId": "u1"})["balance"] == 20
        assert len(sink.payloads("credit.awarded")) == 1

    def test_duplicate_survives_restart(self, data, config):
        # the dedup claim is the ledger key itself, so it outlives the process
        make_reward(data, config).on_esm_completed(*award_event())
        successor = make_reward(data, config)
        successor.on_esm_completed(*award_event())
        assert successor.op_balance({"userId": "u1"})["balance"] == 20

    @pytest.mark.parametrize("amount", [0, -3, True, None, "20"])
    def test_non_positive_amounts_ignored(self, data, config, amount):
        reward = make_reward(data, config)
        payload, env = award_event()
        payload["rewardAmount"] = amount
        reward.on_esm_completed(payload, env)
        assert reward.op_balance({"userId": "u1"})["balance"] == 0

    def test_malformed_event_raises(self, data, config):
        reward = make_reward(data, config)
        with pytest.raises(QrowdError):
            reward.on_esm_completed({"taskId": "t1"}, award_event()[1])

    def test_ledger_listing(self, data, config):
        reward = make_reward(data, config)
        reward.on_esm_completed(*award_event(task="t1", amount=10))
        reward.on_esm_completed(*award_event(task="t2", amount=15))
        out = reward.op_ledger({"userId": "u1"})
        assert out["balance"] == 25
        assert [e["amount"] for e in out["entries"]] == [10, 15]
        assert all(e["kind"] == "award" for e in out["entries"])


class TestRedemption:
    def fund(self, reward, user="u1", amount=50):
        reward.on_esm_completed(*award_event(user=user, task=f"fund-{amount}", amount=amount))

    def test_happy_path(self, data, config, stub, sink):
        reward = make_reward(data, config, stub, sink=sink)
        self.fund(reward)
        out = reward.op_redeem({"userId": "u1", "credits": 12})
        assert out["state"] == "dispensing"
        assert out["coins"] == 2
        assert "nonce" not in out
        final = wait_for_state(reward, out["redemptionId"], "dispensed")
        assert final["credits"] == 12
        assert reward.op_balance({"userId": "u1"})["balance"] == 38
        assert stub.coins_dispensed == 2

        states = [p["state"] for p in sink.payloads("redemption.updated")]
        assert states == ["dispensing", "dispensed"]

    def test_below_minimum(self, data, config, stub):
        reward = make_reward(data, config, stub)
        self.fund(reward)
        with pytest.raises(QrowdError) as err:
            reward.op_redeem({"userId": "u1", "credits": 4})
        assert err.value.code == "BelowMinimum"

    @pytest.mark.parametrize("credits", [0, -5, 2.5, True, "10", None])
    def test_invalid_credits(self, data, config, stub, credits):
        reward = make_reward(data, config, stub)
        self.fund(reward)
        with pytest.raises(QrowdError) as err:
            reward.op_redeem({"userId": "u1", "credits": credits})
        assert err.value.code == "ValidationFailed"

    def test_insufficient(self, data, config, stub):
        reward = make_reward(data, config, stub)
        self.fund(reward, amount=10)
        with pytest.raises(QrowdError) as err:
            reward.op_redeem({"userId": "u1", "credits": 11})
        assert err.value.code == "InsufficientCredits"

    def test_no_device_configured(self, data, config):
        reward = make_reward(data, config)
        self.fund(reward)
        with pytest.raises(QrowdError) as err:
            reward.op_redeem({"userId": "u1", "credits": 10})
        assert err.value.code == "DeviceUnreachable"

    def test_unknown_redemption(self, data, config, stub):
        reward = make_reward(data, config, stub)
        with pytest.raises(QrowdError) as err:
            reward.op_get_redemption({"redemptionId": "missing"})
        assert err.value.code == "UnknownRedemption"

    def test_ledger_balance_matches_fold_oracle(self, data, config, stub):
        reward = make_reward(data, config, stub)
        self.fund(reward)
        out = reward.op_redeem({"userId": "u1", "credits": 10})
        wait_for_state(reward, out["redemptionId"], "dispensed")
        entries = [doc for _, doc in data.docs.scan("reward", LEDGER)]
        redemptions = {rid: doc for rid, doc in data.docs.scan("reward", REDEMPTIONS)}
        assert reward.op_balance({"userId": "u1"})["balance"] == \
            fold_balances(entries, redemptions)["u1"]


class TestDeviceFailures:
    def fund(self, reward, amount=50):
        reward.on_esm_completed(*award_event(task="funding", amount=amount))

    def test_device_error_refunds(self, data, config, sink):
        stub = StubDispenser(behavior="err").start()
        try:
            reward = make_reward(data, config, stub, sink=sink)
            self.fund(reward)
            out = reward.op_redeem({"userId": "u1", "credits": 10})
            wait_for_state(reward, out["redemptionId"], "refunded")
            assert reward.op_balance({"userId": "u1"})["balance"] == 50
            assert stub.coins_dispensed == 0
            states = [p["state"] for p in sink.payloads("redemption.updated")]
            assert states == ["dispensing", "failed", "refunded"]
        finally:
            stub.stop()

    def test_stalled_device_times_out_and_refunds(self, data, config):
        stub = StubDispenser(behavior="stall").start()
        try:
            reward = make_reward(data, config, stub, done_timeout_s=0.3)
            self.fund(reward)
            out = reward.op_redeem({"userId": "u1", "credits": 10})
            wait_for_state(reward, out["redemptionId"], "refunded")
            assert reward.op_balance({"userId": "u1"})["balance"] == 50
        finally:
            stub.stop()

    def test_unreachable_device_leaves_no_trace(self, data, config):
        stub = StubDispenser().start()
        port = stub.port
        stub.stop()
        device = DispenserClient("127.0.0.1", port, ack_timeout_s=0.3, done_timeout_s=0.3)
        reward = RewardService(data, config, device=device)
        self.fund(reward)
        with pytest.raises(DeviceUnreachable):
            reward.op_redeem({"userId": "u1", "credits": 10})
        assert reward.op_balance({"userId": "u1"})["balance"] == 50
        assert list(data.docs.scan("reward", REDEMPTIONS)) == []
        entries = [doc for _, doc in data.docs.scan("reward", LEDGER)]
        assert all(e["kind"] == "award" for e in entries)

    def test_slow_done_still_lands(self, data, config):
        stub = StubDispenser(done_delay_s=0.15).start()
        try:
            reward = make_reward(data, config, stub, done_timeout_s=2.0)
            self.fund(reward)
            out = reward.op_redeem({"userId": "u1", "credits": 5})
            assert out["state"] == "dispensing"
            wait_for_state(reward, out["redemptionId"], "dispensed")
        finally:
            stub.stop()


class TestRebuild:
    def test_orphaned_dispensing_refunded_at_startup(self, data, config):
        # as if the previous process crashed after the device acked
        data.docs.put("reward", REDEMPTIONS, "r1", {
            "redemptionId": "r1", "userId": "u1", "credits": 10, "coins": 2,
            "state": "dispensing", "nonce": "n1", "at": 1,
        })
        data.docs.put("reward", LEDGER, "award_u1_t1", {
            "entryId": "award_u1_t1", "userId": "u1", "kind": "award",
            "amount": 30, "refId": "t1", "at": 0,
        })
        data.docs.put("reward", LEDGER, "e2", {
            "entryId": "e2", "userId": "u1", "kind": "redemption",
            "amount": 10, "refId": "r1", "at": 1,
        })
        reward = make_reward(data, config)
        assert reward.op_get_redemption({"redemptionId": "r1"})["state"] == "refunded"
        assert reward.op_balance({"userId": "u1"})["balance"] == 30

    def test_settled_states_untouched(self, data, config):
        for rid, state in (("r1", "dispensed"), ("r2", "refunded")):
            data.docs.put("reward", REDEMPTIONS, rid, {
                "redemptionId": rid, "userId": "u1", "credits": 10, "coins": 2,
                "state": state, "nonce": rid, "at": 1,
            })
        reward = make_reward(data, config)
        assert reward.op_get_redemption({"redemptionId": "r1"})["state"] == "dispensed"
        assert reward.op_get_redemption({"redemptionId": "r2"})["state"] == "refunded"


class TestConservation:
    def oracle(self, data):
        entries = [doc for _, doc in data.docs.scan("reward", LEDGER)]
        redemptions = {rid: doc for rid, doc in data.docs.scan("reward", REDEMPTIONS)}
        return fold_balances(entries, redemptions)

    def test_random_mix_matches_fold(self, data, config, stub):
        reward = make_reward(data, config, stub)
        rng = random.Random(11)
        users = ["u1", "u2", "u3"]
        pending = []
        for i in range(60):
            user = rng.choice(users)
            if rng.random() < 0.6:
                reward.on_esm_completed(*award_event(
                    user=user, task=f"t{i}", amount=rng.randrange(5, 30),
                ))
            else:
                try:
                    out = reward.op_redeem({"userId": user, "credits": rng.randrange(5, 25)})
                    pending.append(out["redemptionId"])
                except QrowdError as err:
                    assert err.code in ("InsufficientCredits", "BelowMinimum")
        for rid in pending:
            wait_for_state(reward, rid, "dispensed")
        oracle = self.oracle(data)
        for user in users:
            assert reward.op_balance({"userId": user})["balance"] == oracle.get(user, 0)
        assert all(balance >= 0 for balance in oracle.values())

    def test_concurrent_redeems_never_overdraw(self, data, config, stub):
        reward = make_reward(data, config, stub)
        reward.on_esm_completed(*award_event(user="u1", task="big", amount=40))
        results, errors = [], []

        def redeem():
            try:
                results.append(reward.op_redeem({"userId": "u1", "credits": 15}))
            except QrowdError as err:
                errors.append(err.code)

        threads = [threading.Thread(target=redeem) for _ in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        # 40 credits pay for at most two 15-credit redemptions
        assert len(results) == 2
        assert errors == ["InsufficientCredits", "InsufficientCredits"]
        for out in results:
            wait_for_state(reward, out["redemptionId"], "dispensed")
        assert reward.op_balance({"userId": "u1"})["balance"] == 10
        assert self.oracle(data)["u1"] == 10
