import { AnnotateApi } from "./api";
import { startApp } from "./app";

const params = new URLSearchParams(window.location.search);
const sessionId = params.get("session") ?? "";
const root = document.getElementById("app");
if (root) {
  startApp(root, new AnnotateApi(""), sessionId);
}
