import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    include: ["test/**/*.test.ts"],
    // The e2e test spawns a live service and replays ~15s of paced traffic.
    testTimeout: 90_000,
    hookTimeout: 30_000,
  },
});
