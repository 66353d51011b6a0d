import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    environment: "jsdom",
    include: ["tests/**/*.test.ts"],
    // the walkthrough test boots the real backend, which dominates the time
    testTimeout: 60_000,
    hookTimeout: 60_000,
  },
});
