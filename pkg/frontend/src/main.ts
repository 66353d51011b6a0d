/**
 * Page bootstrap: wires the app to the real browser environment and
 * registers the offline shell worker. The gateway origin can be overridden
 * by setting window.QROWD_GATEWAY before this module loads; by default the
 * app talks to the origin it was served from.
 */

import { Api, Fix } from "./api.js";
import { App } from "./app.js";

function geolocationFix(): Promise<Fix | null> {
  return new Promise((resolve) => {
    const geo = navigator.geolocation;
    if (!geo) {
      resolve(null);
      return;
    }
    geo.getCurrentPosition(
      (pos) =>
        resolve({
          position: { lat: pos.coords.latitude, lon: pos.coords.longitude },
          accuracyM: pos.coords.accuracy,
          capturedAt: Date.now(),
        }),
      // submission still goes through without a fix; the server flags it
      () => resolve(null),
      { enableHighAccuracy: true, timeout: 10_000 },
    );
  });
}

const base = (window as any).QROWD_GATEWAY ?? "";
const app = new App({
  api: new Api(base),
  root: document.getElementById("app")!,
  storage: window.localStorage,
  getFix: geolocationFix,
});
app.outbox.attach(window);
void app.start(window.location.search);

if ("serviceWorker" in navigator) {
  navigator.serviceWorker.register("./sw.js").catch(() => {
    // the app is fully functional without the offline shell
  });
}
