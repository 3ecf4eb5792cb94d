import { defineConfig } from "vitest/config";

export default defineConfig({
  server: {
    proxy: {
      // Point the dev server at a running `aicare serve` instance.
      "/api": process.env.AICARE_API ?? "http://127.0.0.1:8000",
      "/healthz": process.env.AICARE_API ?? "http://127.0.0.1:8000",
    },
  },
  test: {
    environment: "jsdom",
    include: ["tests/**/*.test.ts"],
  },
});
