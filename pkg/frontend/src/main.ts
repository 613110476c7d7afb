import { ApiClient } from "./api";
import { createApp } from "./app";

const BASE_URL = (window as { SOAPGEN_BASE_URL?: string }).SOAPGEN_BASE_URL ?? "";

document.addEventListener("DOMContentLoaded", () => {
  const root = document.getElementById("app");
  if (root) {
    createApp(root, new ApiClient(BASE_URL));
  }
});
