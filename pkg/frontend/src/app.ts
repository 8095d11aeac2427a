// Questionnaire shell: pick a session and annotator id, then walk the
// criterion-major screen queue ranking image slots. All state that matters
// lives on the server; reloads land on the first unrated screen.

import { AnnotationApi, ApiError, ItemView } from "./api.js";
import { completionState, resumeIndex, Screen, screenQueue } from "./progress.js";
import { RankingState } from "./ranking.js";

const api = new AnnotationApi("");

interface AppState {
  sessionId: string;
  annotator: string;
  items: ItemView[];
  criteria: string[];
  queue: Screen[];
  index: number;
}

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

function root(): HTMLElement {
  const node = document.getElementById("app");
  if (!node) throw new Error("missing #app container");
  return node;
}

async function boot(): Promise<void> {
  const params = new URLSearchParams(window.location.search);
  const sessionId = params.get("session");
  const annotator = params.get("annotator");
  if (!sessionId || !annotator) {
    await renderSessionPicker();
    return;
  }
  await loadSession(sessionId, annotator);
}

async function renderSessionPicker(): Promise<void> {
  const container = root();
  container.replaceChildren();
  const card = el("div", "card");
  card.append(el("h1", undefined, "Image questionnaire"));
  let sessions;
  try {
    sessions = await api.listSessions();
  } catch (err) {
    card.append(el("p", "error", `Cannot reach the service: ${String(err)}`));
    container.append(card);
    return;
  }
  const form = el("form");
  const select = el("select");
  select.name = "session";
  for (const session of sessions) {
    const option = el("option");
    option.value = session.session_id;
    option.textContent = `${session.dataset_tag} (${session.n_items} items, ${session.session_id})`;
    select.append(option);
  }
  const input = el("input");
  input.name = "annotator";
  input.placeholder = "your annotator id";
  input.required = true;
  const go = el("button", "primary", "Start");
  go.type = "submit";
  form.append(select, input, go);
  form.addEventListener("submit", (event) => {
    event.preventDefault();
    const target = new URLSearchParams();
    target.set("session", select.value);
    target.set("annotator", input.value.trim());
    window.location.search = target.toString();
  });
  card.append(sessions.length ? form : el("p", undefined, "No sessions available yet."));
  container.append(card);
}

async function loadSession(sessionId: string, annotator: string): Promise<void> {
  const payload = await api.sessionItems(sessionId, annotator);
  const criteria = payload.items[0]?.criteria ?? ["IQ", "CIE", "CIKG"];
  const queue = screenQueue(payload.items, criteria);
  const state: AppState = {
    sessionId,
    annotator,
    items: payload.items,
    criteria,
    queue,
    index: resumeIndex(queue),
  };
  renderCurrent(state);
}

function renderCurrent(state: AppState): void {
  if (state.index >= state.queue.length) {
    renderDone(state);
    return;
  }
  const screen = state.queue[state.index];
  if (!screen) throw new Error("queue index out of range");
  renderScreen(state, screen);
}

function renderProgressBar(state: AppState): HTMLElement {
  const completion = completionState(state.items, state.criteria);
  const wrap = el("div", "progress");
  const label = el(
    "span",
    "progress-label",
    `${completion.done} / ${completion.total} ratings` +
      state.criteria
        .map((c) => ` · ${c} ${completion.perCriterion[c]?.done ?? 0}/${state.items.length}`)
        .join(""),
  );
  const bar = el("div", "progress-track");
  const fill = el("div", "progress-fill");
  fill.style.width = completion.total ? `${(100 * completion.done) / completion.total}%` : "0%";
  bar.append(fill);
  wrap.append(label, bar);
  return wrap;
}

function renderScreen(state: AppState, screen: Screen): void {
  const container = root();
  container.replaceChildren();
  const { item, criterion } = screen;
  const ranking = new RankingState(item.slots);

  const card = el("div", "card");
  card.append(renderProgressBar(state));
  card.append(el("h1", undefined, item.entity_display));
  card.append(el("h2", undefined, `Criterion: ${criterion}`));
  card.append(el("p", "prompt", item.criterion_prompts[criterion] ?? ""));

  // IQ judges the image alone; the entity's graph context matters for the
  // relevance criteria, and is the judgment target for CIKG
  if (criterion !== "IQ" && item.context.length > 0) {
    const contextBox = el("div", criterion === "CIKG" ? "context emphasized" : "context");
    contextBox.append(el("h3", undefined, "Knowledge graph facts"));
    const list = el("ul");
    for (const fact of item.context) {
      list.append(el("li", undefined, fact));
    }
    contextBox.append(list);
    card.append(contextBox);
  }

  card.append(
    el(
      "p",
      "hint",
      `Click the images from worst to best; the last click marks the best image (rank ${item.slots.length}).`,
    ),
  );

  const grid = el("div", "slot-grid");
  const badges = new Map<string, HTMLElement>();
  for (const slotId of item.slots) {
    const cell = el("figure", "slot");
    const img = el("img");
    img.src = api.imageUrl(item.image_urls[slotId] ?? "");
    img.alt = "candidate image";
    img.addEventListener("error", () => {
      cell.replaceChildren(placeholder(slotId, img));
    });
    const badge = el("figcaption", "badge", "unranked");
    badges.set(slotId, badge);
    cell.append(img, badge);
    cell.addEventListener("click", () => {
      ranking.toggle(slotId);
      for (const [sid, node] of badges) {
        const rank = ranking.rankOf(sid);
        node.textContent = rank === null ? "unranked" : `rank ${rank}`;
        node.classList.toggle("ranked", rank !== null);
      }
      submit.disabled = !ranking.isComplete();
    });
    grid.append(cell);
  }
  card.append(grid);

  const controls = el("div", "controls");
  const reset = el("button", undefined, "Reset");
  reset.addEventListener("click", () => {
    ranking.reset();
    for (const node of badges.values()) {
      node.textContent = "unranked";
      node.classList.remove("ranked");
    }
    submit.disabled = true;
  });
  const submit = el("button", "primary", "Submit ranking");
  submit.disabled = true; // enabled only once the permutation is complete
  const error = el("p", "error", "");
  submit.addEventListener("click", async () => {
    const payload = ranking.payload();
    if (payload === null) {
      return;
    }
    submit.disabled = true;
    try {
      await api.submitRating({
        session_id: state.sessionId,
        annotator_id: state.annotator,
        item_id: item.item_id,
        criterion,
        ranking: payload,
      });
    } catch (err) {
      error.textContent =
        err instanceof ApiError ? `Rejected by server: ${err.message}` : String(err);
      submit.disabled = false;
      return;
    }
    item.status[criterion] = true;
    state.index += 1;
    renderCurrent(state);
  });
  controls.append(reset, submit, error);
  card.append(controls);
  container.append(card);
}

function placeholder(slotId: string, img: HTMLImageElement): HTMLElement {
  const box = el("div", "placeholder");
  box.append(el("p", undefined, "image failed to load"));
  const retry = el("button", undefined, "Retry");
  retry.addEventListener("click", (event) => {
    event.stopPropagation();
    const parent = box.parentElement;
    if (parent) {
      box.remove();
      parent.prepend(img);
      img.src = img.src.split("#")[0] + `#retry-${Date.now()}`;
    }
  });
  box.append(retry);
  return box;
}

function renderDone(state: AppState): void {
  const container = root();
  container.replaceChildren();
  const card = el("div", "card");
  card.append(renderProgressBar(state));
  card.append(el("h1", undefined, "All items rated - thank you!"));
  const link = el("a", undefined, "View aggregate results (JSON)");
  (link as HTMLAnchorElement).href = api.resultsUrl(state.sessionId);
  card.append(link);
  container.append(card);
}

boot().catch((err) => {
  const container = root();
  container.replaceChildren(el("p", "error", String(err)));
});
