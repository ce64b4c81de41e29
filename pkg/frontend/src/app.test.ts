/** Scripted end-to-end session against the DOM: start, three critiques,
 * reset — verifying the step counter, the disabled-chip rule, and that
 * card order is taken verbatim from the service response. */

import { readFileSync } from "node:fs";
import { resolve } from "node:path";
import { afterEach, beforeEach, describe, expect, it, vi } from "vitest";

import { idle, setup } from "./main.js";
import { FakeService } from "./testing/fake-service.js";

// vitest runs with the frontend directory as root
const INDEX_HTML = readFileSync(resolve("static/index.html"), "utf-8");

function mountApp(): void {
  const bodyMatch = INDEX_HTML.match(/<body>([\s\S]*)<\/body>/);
  document.body.innerHTML = bodyMatch![1];
  document.location.hash = "";
}

function freshService(): FakeService {
  return new FakeService(
    [
      { item: "alpha", keyphrases: ["hoppy", "citrus"] },
      { item: "bravo", keyphrases: ["citrus"] },
      { item: "charlie", keyphrases: ["roasted"] },
      { item: "delta", keyphrases: ["malty"] },
    ],
    ["hoppy", "citrus", "roasted", "malty", "smoky"],
  );
}

let service: FakeService;

beforeEach(() => {
  service = freshService();
  vi.stubGlobal("fetch", service.fetch);
  mountApp();
  setup(document);
});

afterEach(() => vi.unstubAllGlobals());

const $ = <T extends HTMLElement>(selector: string) => {
  const el = document.querySelector<T>(selector);
  if (!el) throw new Error(`missing ${selector}`);
  return el;
};

async function startAsUser(userId: string): Promise<void> {
  await idle();
  const input = $<HTMLInputElement>("#user-id");
  input.value = userId;
  input.dispatchEvent(new Event("input"));
  $("#start").click();
  await idle();
}

function cardTitles(): string[] {
  return [...document.querySelectorAll<HTMLElement>("#cards .card")].map(
    (card) => card.dataset.item ?? "",
  );
}

function clickChip(keyphrase: string): void {
  const chip = [...document.querySelectorAll<HTMLButtonElement>("#cards .chip")]
    .concat([...document.querySelectorAll<HTMLButtonElement>("#explanation .chip")])
    .find((b) => b.dataset.keyphrase === keyphrase && !b.disabled);
  if (!chip) throw new Error(`no clickable chip for ${keyphrase}`);
  chip.click();
}

describe("scripted critiquing session", () => {
  it("start -> three critiques -> reset", async () => {
    await startAsUser("u0001");
    expect($("#step-indicator").textContent).toBe("step 0");
    expect($("#session-panel").hidden).toBe(false);

    // ordering comes verbatim from the service
    const serverOrder = [...service.sessions.values()][0].view.recommendations.map(
      (r) => r.item,
    );
    expect(cardTitles()).toEqual(serverOrder);

    clickChip("hoppy");
    await idle();
    expect($("#step-indicator").textContent).toBe("step 1");

    // already-critiqued chips are disabled everywhere
    const hoppyChips = [...document.querySelectorAll<HTMLButtonElement>(".chip")]
      .filter((b) => b.dataset.keyphrase === "hoppy");
    expect(hoppyChips.length).toBeGreaterThan(0);
    expect(hoppyChips.every((b) => b.disabled)).toBe(true);

    clickChip("citrus");
    await idle();
    clickChip("roasted");
    await idle();
    expect($("#step-indicator").textContent).toBe("step 3");

    // re-ranking reflected verbatim after critiques
    const session = [...service.sessions.values()][0];
    expect(cardTitles()).toEqual(session.view.recommendations.map((r) => r.item));

    // timeline preserves critique order
    const timeline = [...document.querySelectorAll("#timeline li")].map(
      (li) => li.textContent,
    );
    expect(timeline).toEqual([
      'step 1: critiqued "hoppy"',
      'step 2: critiqued "citrus"',
      'step 3: critiqued "roasted"',
    ]);

    $("#reset").click();
    await idle();
    expect($("#session-panel").hidden).toBe(true);
    expect(session.closed).toBe(true);
    expect(document.querySelectorAll("#timeline li")).toHaveLength(0);
  });

  it("critiqued items fall in the rendered ranking", async () => {
    await startAsUser("u0001");
    expect(cardTitles()[0]).toBe("alpha");
    clickChip("hoppy");
    await idle();
    // alpha carries the critiqued keyphrase and must drop below the others
    expect(cardTitles()[0]).not.toBe("alpha");
    expect(cardTitles()[cardTitles().length - 1]).toBe("alpha");
  });

  it("unknown user shows a banner and keeps the start panel", async () => {
    await startAsUser("ghost");
    const banner = $("#banner");
    expect(banner.hidden).toBe(false);
    expect(banner.textContent).toContain("user_not_found");
    expect($("#session-panel").hidden).toBe(true);
  });

  it("empty selection disables start", async () => {
    await idle();
    const start = $<HTMLButtonElement>("#start");
    expect(start.disabled).toBe(true);
    const input = $<HTMLInputElement>("#user-id");
    input.value = "u0001";
    input.dispatchEvent(new Event("input"));
    expect(start.disabled).toBe(false);
  });

  it("cold start via seed keyphrase chips", async () => {
    await idle(); // keyphrases loaded
    const seed = [...document.querySelectorAll<HTMLButtonElement>("#seed-keyphrases .chip")]
      .find((b) => b.textContent === "citrus");
    expect(seed).toBeDefined();
    seed!.click();
    expect($<HTMLButtonElement>("#start").disabled).toBe(false);
    $("#start").click();
    await idle();
    expect($("#step-indicator").textContent).toBe("step 0");
  });

  it("conflict on a closed session surfaces a toast and keeps the view", async () => {
    await startAsUser("u0001");
    const session = [...service.sessions.values()][0];
    session.closed = true; // closed behind the client's back
    clickChip("malty");
    await idle();
    expect($("#toast").hidden).toBe(false);
    expect($("#step-indicator").textContent).toBe("step 0");
  });

  it("rehydrates a session from the URL hash", async () => {
    await startAsUser("u0001");
    clickChip("hoppy");
    await idle();
    const sid = [...service.sessions.keys()][0];

    // simulate a refresh: fresh DOM, same hash
    mountApp();
    document.location.hash = sid;
    setup(document);
    await idle();
    expect($("#step-indicator").textContent).toBe("step 1");
    const timeline = [...document.querySelectorAll("#timeline li")];
    expect(timeline).toHaveLength(1);
  });
});
