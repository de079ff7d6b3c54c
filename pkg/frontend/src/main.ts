/**
 * Editor bootstrap: load ground-truth (image, graph) pairs from the
 * service, edit the graph on the canvas, and generate batches of four.
 */

import { ServiceClient, ServiceError } from "./api.js";
import { GraphCanvas, renderBatchGrid } from "./editor.js";
import { EditorState, EDITOR_DEFAULTS } from "./state.js";

const client = new ServiceClient("");

function el<T extends HTMLElement>(id: string): T {
  const found = document.getElementById(id);
  if (!found) throw new Error(`missing #${id}`);
  return found as T;
}

async function boot(): Promise<void> {
  const canvas = el<HTMLCanvasElement>("graph-canvas");
  const graphList = el<HTMLSelectElement>("graph-list");
  const generateButton = el<HTMLButtonElement>("generate");
  const undoButton = el<HTMLButtonElement>("undo");
  const redoButton = el<HTMLButtonElement>("redo");
  const banner = el<HTMLDivElement>("banner");
  const grid = el<HTMLDivElement>("results");
  const metadata = el<HTMLDivElement>("metadata");
  const groundTruth = el<HTMLImageElement>("ground-truth");
  const notes = el<HTMLTextAreaElement>("notes");

  const state = new EditorState({ version: 1, size: [64, 64], nodes: [], edges: [] });
  const view = new GraphCanvas(canvas, state, { onEdit: refreshControls });

  function refreshControls(): void {
    undoButton.disabled = !state.canUndo();
    redoButton.disabled = !state.canRedo();
  }

  function showError(message: string): void {
    banner.textContent = message;
    banner.classList.add("visible");
  }

  function clearError(): void {
    banner.textContent = "";
    banner.classList.remove("visible");
  }

  notes.addEventListener("input", () => {
    state.notes = notes.value;
  });

  undoButton.addEventListener("click", () => {
    state.undo();
    refreshControls();
    view.draw();
  });
  redoButton.addEventListener("click", () => {
    state.redo();
    refreshControls();
    view.draw();
  });

  generateButton.addEventListener("click", async () => {
    if (state.generating) return;
    clearError();
    state.generating = true;
    generateButton.disabled = true;
    try {
      const result = await client.generate(
        state.emitGraph(), EDITOR_DEFAULTS.batchSize, EDITOR_DEFAULTS.omega,
      );
      state.lastBatch = result;
      renderBatchGrid(grid, result.images);
      metadata.textContent =
        `seed ${result.metadata.seed} | omega ${result.metadata.omega}` +
        (result.metadata.model_checksum
          ? ` | model ${result.metadata.model_checksum.slice(0, 12)}`
          : "");
    } catch (error) {
      // the edited graph is untouched on failure; user can retry
      if (error instanceof ServiceError) {
        showError(`generation failed (${error.status}): ${JSON.stringify(error.detail)}`);
      } else {
        showError(`service unreachable: ${String(error)}`);
      }
    } finally {
      state.generating = false;
      generateButton.disabled = false;
    }
  });

  async function loadSelected(): Promise<void> {
    const id = graphList.value;
    if (!id) return;
    try {
      const entry = await client.getGraph(id);
      state.loadGraph(entry.graph, entry.image_ref);
      groundTruth.src = entry.image_ref ?? "";
      clearError();
      refreshControls();
      view.draw();
    } catch (error) {
      showError(`could not load graph: ${String(error)}`);
    }
  }
  graphList.addEventListener("change", loadSelected);

  try {
    const entries = await client.listGraphs();
    for (const entry of entries) {
      const option = document.createElement("option");
      option.value = entry.id;
      option.textContent = entry.id;
      graphList.appendChild(option);
    }
    if (entries.length) {
      graphList.value = entries[0]!.id;
      await loadSelected();
    }
  } catch (error) {
    showError(`could not list graphs: ${String(error)}`);
  }
  refreshControls();
  view.draw();
}

window.addEventListener("DOMContentLoaded", () => {
  void boot();
});
