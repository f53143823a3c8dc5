// DOM wiring for the observer study: two images side by side, forced choice
// via click or arrow keys, shared pan/zoom, progress without a running
// score, and the server's report at the end.

import { Choice, StudyClient } from "./api.js";
import { FlowState, SessionFlow, choiceForKey } from "./session.js";

const client = new StudyClient(window.location.origin);
const flow = new SessionFlow(client);

const root = document.getElementById("app") as HTMLElement;

let zoom = 1;
let panX = 0;
let panY = 0;
let dragging = false;
let dragStart: [number, number] = [0, 0];

function resetView() {
  zoom = 1;
  panX = 0;
  panY = 0;
}

function applyView() {
  for (const img of root.querySelectorAll<HTMLImageElement>(".pane img")) {
    img.style.transform = `translate(${panX}px, ${panY}px) scale(${zoom})`;
  }
}

function el(tag: string, className?: string, text?: string): HTMLElement {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

function renderTrial(state: Extract<FlowState, { kind: "trial" }>) {
  root.replaceChildren();
  const { trial } = state;
  root.append(
    el("p", "progress", `Trial ${trial.trial + 1} of ${trial.trial_count}`),
    el("p", "hint",
       "Which image is the original? Click it, or press the left/right arrow key. " +
       "Scroll to zoom, drag to pan."),
  );
  const row = el("div", "panes");
  for (const side of ["left", "right"] as const) {
    const pane = el("div", "pane");
    const img = document.createElement("img");
    img.src = client.url(side === "left" ? trial.left : trial.right);
    img.alt = `${side} image`;
    img.draggable = false;
    pane.append(img, el("p", "label", side === "left" ? "← left" : "right →"));
    pane.addEventListener("click", () => submit(side));
    row.append(pane);
  }
  root.append(row);
  resetView();
  applyView();
}

function renderReport(state: Extract<FlowState, { kind: "report" }>) {
  root.replaceChildren();
  const { report } = state;
  const pct = (report.accuracy * 100).toFixed(1);
  root.append(
    el("h2", undefined, "Session complete"),
    el("p", "accuracy",
       `Accuracy: ${report.correct} / ${report.answered} (${pct}%)`),
  );
  const list = el("ul", "trials");
  for (const t of report.trials) {
    list.append(el("li", t.correct ? "correct" : "incorrect",
                   `Trial ${t.trial + 1}: ${t.choice} ` +
                   `(${t.correct ? "correct" : "incorrect"})`));
  }
  root.append(list);
}

function renderRetry(state: Extract<FlowState, { kind: "retry" }>) {
  root.replaceChildren();
  root.append(
    el("p", "error",
       `Connection problem on trial ${state.index + 1}: ${state.message}`),
  );
  const button = el("button", undefined, "Retry") as HTMLButtonElement;
  button.addEventListener("click", async () => render(await flow.retry()));
  root.append(button);
}

function render(state: FlowState) {
  if (state.kind === "trial") renderTrial(state);
  else if (state.kind === "report") renderReport(state);
  else if (state.kind === "retry") renderRetry(state);
}

async function submit(choice: Choice) {
  render(await flow.choose(choice));
}

document.addEventListener("keydown", (ev) => {
  const choice = choiceForKey(ev.key);
  if (choice !== null) void submit(choice);
});

document.addEventListener("wheel", (ev) => {
  if (!root.querySelector(".panes")) return;
  ev.preventDefault();
  const factor = ev.deltaY < 0 ? 1.25 : 0.8;
  zoom = Math.min(16, Math.max(1, zoom * factor));
  if (zoom === 1) resetView();
  applyView();
}, { passive: false });

document.addEventListener("mousedown", (ev) => {
  if ((ev.target as HTMLElement).closest(".pane")) {
    dragging = true;
    dragStart = [ev.clientX - panX, ev.clientY - panY];
  }
});
document.addEventListener("mousemove", (ev) => {
  if (!dragging) return;
  panX = ev.clientX - dragStart[0];
  panY = ev.clientY - dragStart[1];
  applyView();
});
document.addEventListener("mouseup", () => {
  dragging = false;
});

void flow.start().then(render);
