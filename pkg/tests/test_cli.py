"""Admin CLI against a live gateway.

The interesting invariants: every /admin endpoint is reachable from exactly
one subcommand, --json always emits a single parseable document, and the
exit code split (0 ok, 1 domain error, 2 usage error) holds everywhere.
"""

from __future__ import annotations

import json
from types import SimpleNamespace

import pytest
import requests
from click.testing import CliRunner

from qrowd import cli
from qrowd.config import PlatformConfig
from qrowd.gateway.http import ROUTES, Gateway
from qrowd.platform import Platform

PASSWORD = "plenty-long-pw"


@pytest.fixture(scope="module")
def stack():
    # the whole module shares one researcher token; keep the limiter out of
    # the way so only the dedicated rate-limit tests exercise it
    config = PlatformConfig.for_tests(rate_limit_max=10_000)
    plat = Platform(config, replicas=2)
    gw = Gateway(plat.fabric, config)
    doc = requests.post(gw.url + "/auth/login", json={
        "email": config.researcher_email,
        "password": config.researcher_password,
    }, timeout=10).json()
    yield SimpleNamespace(config=config, plat=plat, gw=gw, url=gw.url,
                          admin_token=doc["token"])
    gw.stop()
    plat.stop()


def invoke(stack, *args, token=None, json_mode=True, url=None):
    env = {"QROWD_URL": url or stack.url}
    if token is not None:
        env["QROWD_TOKEN"] = token
    argv = (["--json"] if json_mode else []) + list(args)
    return CliRunner().invoke(cli.main, argv, env=env, catch_exceptions=False)


def run_ok(stack, *args, token=None, json_mode=True):
    result = invoke(stack, *args, token=token or stack.admin_token, json_mode=json_mode)
    assert result.exit_code == 0, result.output + result.stderr
    if json_mode:
        return json.loads(result.stdout)
    return result.stdout


def run_err(stack, *args, token=None, code=""):
    result = invoke(stack, *args, token=token or stack.admin_token)
    assert result.exit_code == 1, result.output + result.stderr
    assert code in result.stderr
    assert result.stdout == ""
    return result


def make_participant(stack, email):
    requests.post(stack.url + "/auth/register",
                  json={"email": email, "password": PASSWORD}, timeout=10)
    doc = requests.post(stack.url + "/auth/login",
                        json={"email": email, "password": PASSWORD}, timeout=10).json()
    return doc["token"], doc["userId"]


class TestSurfaceParity:
    def test_every_admin_endpoint_has_exactly_one_command(self):
        gateway_admin = {(r.method, r.pattern) for r in ROUTES
                         if r.pattern.startswith("/admin")}
        assert set(cli.ADMIN_ENDPOINTS.values()) == gateway_admin
        # dict values unique: no endpoint is shared by two commands
        assert len(set(cli.ADMIN_ENDPOINTS.values())) == len(cli.ADMIN_ENDPOINTS)

    def test_every_parity_entry_names_a_real_command(self):
        for spec in cli.ADMIN_ENDPOINTS:
            group_name, command_name = spec.split(" ", 1)
            group = cli.main.commands[group_name]
            assert command_name in group.commands, spec


class TestParseTs:
    def test_date_is_utc_midnight(self):
        assert cli.parse_ts("2026-01-02") == 1767312000000

    def test_naive_datetime_is_utc(self):
        assert cli.parse_ts("2026-01-02T00:00:00") == cli.parse_ts("2026-01-02")

    def test_offset_respected(self):
        utc = cli.parse_ts("2026-01-02T12:00:00+00:00")
        assert cli.parse_ts("2026-01-02T14:00:00+02:00") == utc

    def test_epoch_ms_passthrough(self):
        assert cli.parse_ts("1767312000000") == 1767312000000

    def test_garbage_rejected(self):
        import click as click_mod
        with pytest.raises(click_mod.BadParameter):
            cli.parse_ts("yesterday-ish")


class TestLogin:
    def test_json_doc_has_token(self, stack):
        result = invoke(stack, "login", "--email", stack.config.researcher_email,
                        "--password", stack.config.researcher_password)
        assert result.exit_code == 0
        doc = json.loads(result.stdout)
        assert doc["role"] == "researcher"
        assert doc["token"]

    def test_table_mode_prints_export_hint(self, stack):
        result = invoke(stack, "login", "--email", stack.config.researcher_email,
                        "--password", stack.config.researcher_password,
                        json_mode=False)
        assert result.exit_code == 0
        assert "export QROWD_TOKEN=" in result.output

    def test_bad_password_is_domain_error(self, stack):
        result = invoke(stack, "login", "--email", stack.config.researcher_email,
                        "--password", "wrong-password-xx")
        assert result.exit_code == 1
        assert "BadCredentials" in result.stderr


class TestUsageErrors:
    def test_missing_url_is_usage_error(self, stack):
        result = CliRunner().invoke(
            cli.main, ["marker", "list"],
            env={"QROWD_URL": "", "QROWD_TOKEN": stack.admin_token})
        assert result.exit_code == 2
        assert "QROWD_URL" in result.stderr

    def test_unknown_command(self, stack):
        result = invoke(stack, "marker", "explode", token=stack.admin_token)
        assert result.exit_code == 2

    def test_missing_required_option(self, stack):
        result = invoke(stack, "marker", "add", "--name", "x",
                        token=stack.admin_token)
        assert result.exit_code == 2

    def test_bad_timestamp_is_usage_error(self, stack):
        result = invoke(stack, "report", "run", "taskFunnel",
                        "--from", "not-a-date", "--to", "2026-01-02",
                        token=stack.admin_token)
        assert result.exit_code == 2

    def test_unreachable_gateway_is_domain_error(self, stack):
        result = invoke(stack, "marker", "list", token=stack.admin_token,
                        url="http://127.0.0.1:9")
        assert result.exit_code == 1
        assert "Unreachable" in result.stderr


class TestAuth:
    def test_no_token_is_domain_error(self, stack):
        result = invoke(stack, "marker", "list")
        assert result.exit_code == 1
        assert "TokenMissing" in result.stderr

    def test_participant_token_denied_on_admin(self, stack):
        token, _ = make_participant(stack, "cli.part.1@example.org")
        run_err(stack, "marker", "list", token=token, code="AccessDenied")


class TestMarkerCommands:
    def test_add_list_deactivate(self, stack):
        doc = run_ok(stack, "marker", "add", "--name", "Library entrance",
                     "--lat", "48.15", "--lon", "11.58")
        marker_id = doc["markerId"]
        assert doc["qrPayload"]

        listing = run_ok(stack, "marker", "list")
        assert marker_id in [m["markerId"] for m in listing["markers"]]

        text = run_ok(stack, "marker", "list", json_mode=False)
        assert "Library entrance" in text
        assert text.splitlines()[0].startswith("markerId")

        run_ok(stack, "marker", "deactivate", marker_id)
        active = run_ok(stack, "marker", "list", "--active-only")
        assert marker_id not in [m["markerId"] for m in active["markers"]]

    def test_json_round_trips_with_gateway(self, stack):
        doc = run_ok(stack, "marker", "add", "--name", "Round trip",
                     "--lat", "48.0", "--lon", "11.0")
        via_http = requests.get(
            stack.url + "/admin/markers",
            headers={"Authorization": f"Bearer {stack.admin_token}"},
            timeout=10).json()
        match = [m for m in via_http["markers"] if m["markerId"] == doc["markerId"]]
        assert match == [doc]


class TestTaskCommands:
    def make_task_file(self, tmp_path, stack, title="Count the chairs"):
        marker = run_ok(stack, "marker", "add", "--name", f"m-{title}",
                        "--lat", "48.1", "--lon", "11.5")
        path = tmp_path / "task.json"
        path.write_text(json.dumps({
            "title": title,
            "difficulty": "easy",
            "responseType": "numeric",
            "rewardAmount": 5,
            "markerIds": [marker["markerId"]],
        }))
        return path

    def test_create_publish_show_retire(self, stack, tmp_path):
        path = self.make_task_file(tmp_path, stack)
        doc = run_ok(stack, "task", "create", "--file", str(path))
        task_id = doc["taskId"]
        assert doc["status"] == "draft"

        run_ok(stack, "task", "publish", task_id)
        published = run_ok(stack, "task", "list", "--status", "published")
        assert task_id in [t["taskId"] for t in published["tasks"]]

        shown = run_ok(stack, "task", "show", task_id)
        assert shown["title"] == "Count the chairs"

        run_ok(stack, "task", "retire", task_id)
        assert run_ok(stack, "task", "show", task_id)["status"] == "retired"

    def test_create_reads_stdin_with_dash(self, stack):
        marker = run_ok(stack, "marker", "add", "--name", "stdin marker",
                        "--lat", "48.2", "--lon", "11.6")
        body = json.dumps({
            "title": "From stdin", "difficulty": "hard",
            "responseType": "text", "rewardAmount": 12,
            "markerIds": [marker["markerId"]],
        })
        result = CliRunner().invoke(
            cli.main, ["--json", "task", "create", "--file", "-"], input=body,
            env={"QROWD_URL": stack.url, "QROWD_TOKEN": stack.admin_token})
        assert result.exit_code == 0, result.stderr
        task_id = json.loads(result.stdout)["taskId"]
        assert run_ok(stack, "task", "show", task_id)["title"] == "From stdin"

    def test_invalid_json_file_is_usage_error(self, stack, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{nope")
        result = invoke(stack, "task", "create", "--file", str(path),
                        token=stack.admin_token)
        assert result.exit_code == 2

    def test_publish_unknown_task_is_domain_error(self, stack):
        run_err(stack, "task", "publish", "tk_does_not_exist", code="UnknownTask")


class TestEsmCommands:
    def test_set_and_show_instrument(self, stack, tmp_path):
        path = tmp_path / "items.json"
        path.write_text(json.dumps([
            {"itemId": "mood", "prompt": "How do you feel right now?",
             "scale": "likert5"},
            {"itemId": "note", "prompt": "Any comment?", "scale": "freeText"},
        ]))
        doc = run_ok(stack, "esm", "set-instrument", "--file", str(path))
        assert doc["instrumentId"]

        shown = run_ok(stack, "esm", "show-instrument")
        assert [i["itemId"] for i in shown["items"]] == ["mood", "note"]

        text = run_ok(stack, "esm", "show-instrument", json_mode=False)
        assert "How do you feel right now?" in text

    def test_list_pending_for_participant(self, stack):
        token, _ = make_participant(stack, "cli.esm@example.org")
        doc = run_ok(stack, "esm", "list-pending", token=token)
        assert doc["pending"] == []


class TestFeedbackCommands:
    def test_list_and_ack(self, stack):
        token, user_id = make_participant(stack, "cli.fb@example.org")
        posted = requests.post(
            stack.url + "/feedback", json={"text": "The map froze twice."},
            headers={"Authorization": f"Bearer {token}"}, timeout=10).json()

        listing = run_ok(stack, "feedback", "list", "--status", "new")
        entry = [f for f in listing["feedback"]
                 if f["feedbackId"] == posted["feedbackId"]]
        assert entry and entry[0]["userId"] == user_id

        acked = run_ok(stack, "feedback", "ack", posted["feedbackId"])
        assert acked["status"] == "acknowledged"

        remaining = run_ok(stack, "feedback", "list", "--status", "new")
        assert posted["feedbackId"] not in [
            f["feedbackId"] for f in remaining["feedback"]]

    def test_ack_unknown_is_domain_error(self, stack):
        run_err(stack, "feedback", "ack", "fb_missing", code="UnknownFeedback")


class TestReportCommands:
    @pytest.fixture()
    def seeded(self, stack):
        token, user_id = make_participant(stack, "cli.report@example.org")
        for n in range(2):
            requests.post(stack.url + "/events", json={
                "eventId": f"cli-ev-{n}", "kind": "scan",
                "sessionId": "cli-session", "markerId": "mk-x",
            }, headers={"Authorization": f"Bearer {token}"}, timeout=10)
        return user_id

    def test_run_user_activity(self, stack, seeded):
        doc = run_ok(stack, "report", "run", "userActivity",
                     "--from", "2020-01-01", "--to", "2036-01-01")
        keys = [row["groupKey"] for row in doc["rows"]]
        assert seeded in keys

        text = run_ok(stack, "report", "run", "userActivity",
                      "--from", "2020-01-01", "--to", "2036-01-01",
                      json_mode=False)
        assert text.splitlines()[0].startswith("groupKey")

    def test_export_csv_to_stdout(self, stack, seeded):
        text = run_ok(stack, "report", "export", "userActivity",
                      "--from", "2020-01-01", "--to", "2036-01-01",
                      json_mode=False)
        assert text.startswith("groupKey,logins,scans,completed")
        # CliRunner translates newlines in captured stdout, so check the
        # RFC 4180 line endings through the JSON envelope instead
        doc = run_ok(stack, "report", "export", "userActivity",
                     "--from", "2020-01-01", "--to", "2036-01-01")
        assert doc["format"] == "csv"
        assert "\r\n" in doc["content"]

    def test_export_json_mode_single_doc(self, stack, seeded):
        doc = run_ok(stack, "report", "export", "userActivity",
                     "--from", "2020-01-01", "--to", "2036-01-01",
                     "--format", "json")
        assert doc["format"] == "json"
        json.loads(doc["content"])

    def test_bad_group_by_is_domain_error(self, stack):
        run_err(stack, "report", "run", "taskFunnel",
                "--from", "2020-01-01", "--to", "2036-01-01",
                "--group-by", "day", code="UnsupportedCombination")

    def test_unknown_kind_is_usage_error(self, stack):
        result = invoke(stack, "report", "run", "everything",
                        "--from", "2020-01-01", "--to", "2036-01-01",
                        token=stack.admin_token)
        assert result.exit_code == 2


class TestFleetCommands:
    def test_status_lists_services(self, stack):
        doc = run_ok(stack, "fleet", "status")
        services = {entry["service"] for entry in doc["fleet"]}
        assert {"auth", "task", "reward"} <= services

        text = run_ok(stack, "fleet", "status", json_mode=False)
        assert "task:" in text and "healthy" in text

    def test_scale_and_redeploy(self, stack):
        doc = run_ok(stack, "fleet", "scale", "task", "3")
        assert doc["plan"]["task"] == 3

        redeploy = run_ok(stack, "fleet", "redeploy", "task", "--version", "v9")
        assert redeploy["version"] == "v9"
        assert redeploy["replaced"] == 3

        run_ok(stack, "fleet", "scale", "task", "2")

    def test_scale_below_minimum_is_domain_error(self, stack):
        run_err(stack, "fleet", "scale", "task", "0", code="CapExceeded")

    def test_unknown_service_is_domain_error(self, stack):
        run_err(stack, "fleet", "scale", "mailer", "2", code="UnknownService")


class TestJsonSingleDoc:
    def test_every_json_invocation_is_one_document(self, stack):
        commands = [
            ["marker", "list"],
            ["task", "list"],
            ["esm", "show-instrument"],
            ["feedback", "list"],
            ["fleet", "status"],
            ["report", "run", "creditFlow", "--from", "2020-01-01",
             "--to", "2036-01-01"],
        ]
        for argv in commands:
            result = invoke(stack, *argv, token=stack.admin_token)
            assert result.exit_code == 0, result.stderr
            json.loads(result.stdout)  # raises if more than one doc
