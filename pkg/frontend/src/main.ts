// DOM glue: wires the form, mode toggle and course selector to the chat
// session, renders after every state change, and opens slide overlays.

import { askStream, fetchCourses, type CoursesInfo } from "./api.js";
import { renderSession } from "./render.js";
import { ChatSession } from "./state.js";

const session = new ChatSession();

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

function restoreSelection(select: HTMLSelectElement, key: string): void {
  const saved = sessionStorage.getItem(key);
  if (saved && [...select.options].some((o) => o.value === saved)) {
    select.value = saved;
  }
  select.addEventListener("change", () => sessionStorage.setItem(key, select.value));
}

function render(): void {
  el<HTMLDivElement>("transcript").innerHTML = renderSession(session.turns);
  el<HTMLButtonElement>("send").disabled = session.busy;
  el<HTMLInputElement>("question").disabled = session.busy;
}

function openOverlay(img: HTMLImageElement, meta: string): void {
  const overlay = document.createElement("div");
  overlay.className = "overlay";
  overlay.innerHTML = `<figure><img src="${img.src}" alt="${img.alt}"><figcaption>${meta}</figcaption></figure>`;
  overlay.addEventListener("click", () => overlay.remove());
  document.body.appendChild(overlay);
}

async function boot(): Promise<void> {
  const modeSelect = el<HTMLSelectElement>("mode");
  const courseSelect = el<HTMLSelectElement>("course");
  let info: CoursesInfo;
  try {
    info = await fetchCourses();
  } catch {
    el<HTMLDivElement>("transcript").innerHTML =
      `<section class="turn state-error"><div class="answer error"><p>service unreachable</p></div></section>`;
    return;
  }
  for (const course of info.courses) {
    const option = document.createElement("option");
    option.value = course.course_id;
    option.textContent = `${course.course_id} (${course.chunk_count})`;
    courseSelect.appendChild(option);
  }
  modeSelect.value = info.default_mode;
  const multimodalOption = [...modeSelect.options].find((o) => o.value === "multimodal_rag");
  if (multimodalOption && !info.generator.image_capable) {
    multimodalOption.disabled = true;
    multimodalOption.title = `generator ${info.generator.id} cannot process images`;
  }
  restoreSelection(modeSelect, "lectern.mode");
  restoreSelection(courseSelect, "lectern.course");

  el<HTMLFormElement>("ask-form").addEventListener("submit", (event) => {
    event.preventDefault();
    const input = el<HTMLInputElement>("question");
    const question = input.value.trim();
    if (!question || session.busy) return;
    input.value = "";
    void session.submit(
      {
        question,
        mode: modeSelect.value,
        course_id: courseSelect.value || undefined,
      },
      (options, onFrame) => askStream(options, onFrame),
      render,
    );
  });

  el<HTMLDivElement>("transcript").addEventListener("click", (event) => {
    const target = event.target as HTMLElement;
    const image = target.closest<HTMLImageElement>(".image-card img");
    if (image) {
      const card = image.closest<HTMLElement>(".source-card");
      openOverlay(image, card?.querySelector(".card-meta")?.textContent ?? "");
      return;
    }
    const retry = target.closest<HTMLButtonElement>("button.retry");
    if (retry && !session.busy) {
      const turn = session.turns[Number(retry.dataset.turn)];
      if (turn) {
        void session.submit(
          { question: turn.question, mode: turn.mode, course_id: courseSelect.value || undefined },
          (options, onFrame) => askStream(options, onFrame),
          render,
        );
      }
    }
  });

  render();
}

void boot();
