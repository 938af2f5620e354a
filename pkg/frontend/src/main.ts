import { Annotator } from "./annotator";
import { AssessmentApi } from "./api";

function requireElement(id: string): HTMLElement {
  const element = document.getElementById(id);
  if (!element) {
    throw new Error(`missing element #${id}`);
  }
  return element;
}

function render(annotator: Annotator): void {
  const view = annotator.view();
  requireElement("progress").textContent = view.progress;
  requireElement("sample-text").textContent = view.done
    ? "All samples voted. Thank you!"
    : view.text ?? "";
  requireElement("offline-banner").style.display = view.offline ? "block" : "none";
  for (const panel of ["A", "B"] as const) {
    const drawer = requireElement(`drawer-${panel}`);
    drawer.style.display = annotator.drawerOpen === panel ? "block" : "none";
    drawer.querySelector("ul")!.innerHTML = annotator
      .anchorPageOf(panel)
      .map((text) => `<li>${text.replace(/</g, "&lt;")}</li>`)
      .join("");
  }
}

export async function start(): Promise<void> {
  const params = new URLSearchParams(window.location.search);
  const sessionId = params.get("session") ?? "session";
  const raterId = params.get("rater") ?? "anonymous";
  const api = new AssessmentApi("");
  const annotator = new Annotator(api, sessionId, raterId);
  await annotator.load();

  const vote = async (choice: "A" | "B" | "neither") => {
    await annotator.choose(choice);
    render(annotator);
  };
  requireElement("choose-a").onclick = () => vote("A");
  requireElement("choose-b").onclick = () => vote("B");
  requireElement("choose-neither").onclick = () => vote("neither");
  requireElement("toggle-a").onclick = () => {
    annotator.toggleDrawer("A");
    render(annotator);
  };
  requireElement("toggle-b").onclick = () => {
    annotator.toggleDrawer("B");
    render(annotator);
  };
  requireElement("retry").onclick = async () => {
    await annotator.flush();
    render(annotator);
  };
  document.addEventListener("keydown", async (event) => {
    await annotator.handleKey(event.key);
    render(annotator);
  });
  window.addEventListener("online", async () => {
    await annotator.flush();
    render(annotator);
  });
  render(annotator);
}

if (typeof document !== "undefined" && document.getElementById("sample-text")) {
  start();
}
