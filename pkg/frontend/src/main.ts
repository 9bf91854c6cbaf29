import { App } from "./app.js";

const BASE_KEY = "metacat.baseUrl";
const DEFAULT_BASE = "http://127.0.0.1:8000";

const saved =
  typeof localStorage !== "undefined" ? localStorage.getItem(BASE_KEY) : null;

const root = document.getElementById("app");
if (!root) throw new Error("missing #app mount point");

const app = new App(root, saved ?? DEFAULT_BASE, (url) => {
  try {
    localStorage.setItem(BASE_KEY, url);
  } catch {
    // storage unavailable (private mode); the setting just won't persist
  }
});
app.mount();
