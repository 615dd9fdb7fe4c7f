import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    include: ["tests/**/*.test.ts"],
    environment: "node",
    // e2e suite spawns the backend and drives it over HTTP
    testTimeout: 120_000,
    hookTimeout: 120_000,
  },
});
