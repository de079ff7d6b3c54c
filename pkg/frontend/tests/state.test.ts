import { describe, expect, it } from "vitest";

import { SceneGraph, serializeGraph, validateGraph } from "../src/graph.js";
import { EDITOR_DEFAULTS, EditorState } from "../src/state.js";

function startGraph(): SceneGraph {
  return {
    version: 1,
    size: [64, 64],
    nodes: [
      { class_id: 1, class_count: 6, spread: [0.6, 0.6], centroid: [0.5, 0.5], component_id: 0 },
      { class_id: 2, class_count: 6, spread: [0.2, 0.2], centroid: [0.4, 0.4], component_id: 1 },
      { class_id: 3, class_count: 6, spread: [0.2, 0.15], centroid: [0.6, 0.55], component_id: 2 },
    ],
    edges: [
      [0, 1],
      [0, 2],
    ],
  };
}

/** Deterministic LCG so the 1000-script replay is reproducible. */
function makeRng(seed: number): () => number {
  let state = seed >>> 0;
  return () => {
    state = (state * 1664525 + 1013904223) >>> 0;
    return state / 2 ** 32;
  };
}

describe("EditorState basics", () => {
  it("delete then undo restores the exact graph", () => {
    const state = new EditorState(startGraph());
    const before = serializeGraph(state.graph);
    state.removeNode(1);
    expect(serializeGraph(state.graph)).not.toBe(before);
    state.undo();
    expect(serializeGraph(state.graph)).toBe(before);
  });

  it("undo/redo round-trips through a whole edit session", () => {
    const state = new EditorState(startGraph());
    const snapshots = [serializeGraph(state.graph)];
    state.move(0, [0.25, 0.25]);
    snapshots.push(serializeGraph(state.graph));
    state.changeNodeClass(1, 4);
    snapshots.push(serializeGraph(state.graph));
    state.removeNode(2);
    snapshots.push(serializeGraph(state.graph));
    state.addNodeAt(0.7, 0.3, 2);
    snapshots.push(serializeGraph(state.graph));

    for (let i = snapshots.length - 2; i >= 0; i--) {
      state.undo();
      expect(serializeGraph(state.graph)).toBe(snapshots[i]);
    }
    for (let i = 1; i < snapshots.length; i++) {
      state.redo();
      expect(serializeGraph(state.graph)).toBe(snapshots[i]);
    }
  });

  it("a drag produces one undo entry and clamps to [0,1]", () => {
    const state = new EditorState(startGraph());
    const before = serializeGraph(state.graph);
    state.beginDrag(0);
    state.dragTo(0.8, 0.2);
    state.dragTo(1.7, -0.4); // off-canvas: clamped
    state.endDrag();
    expect(state.graph.nodes[0]!.centroid).toEqual([1, 0]);
    state.undo();
    expect(serializeGraph(state.graph)).toBe(before);
    expect(state.canUndo()).toBe(false);
  });

  it("added nodes use the configured default spread", () => {
    const state = new EditorState(startGraph());
    state.addNodeAt(0.33, 0.44, 5);
    const added = state.graph.nodes.at(-1)!;
    expect(added.spread).toEqual(EDITOR_DEFAULTS.addNodeSpread);
    expect(added.centroid).toEqual([0.33, 0.44]);
    expect(added.component_id).toBe(-1);
  });

  it("rejects loading an invalid graph", () => {
    const bad = startGraph();
    bad.nodes[0]!.centroid = [2, 2];
    expect(() => new EditorState(bad)).toThrow();
  });
});

describe("random interaction scripts", () => {
  it("1000 scripts never emit a schema-invalid graph", () => {
    for (let script = 0; script < 1000; script++) {
      const rng = makeRng(script + 1);
      const state = new EditorState(startGraph());
      const steps = 1 + Math.floor(rng() * 12);
      for (let step = 0; step < steps; step++) {
        const n = state.graph.nodes.length;
        const action = rng();
        if (action < 0.3 && n > 0) {
          const idx = Math.floor(rng() * n);
          state.beginDrag(idx);
          state.dragTo(rng() * 1.4 - 0.2, rng() * 1.4 - 0.2);
          state.endDrag();
        } else if (action < 0.5 && n > 0) {
          state.changeNodeClass(Math.floor(rng() * n), Math.floor(rng() * 6));
        } else if (action < 0.7 && n > 0) {
          state.removeNode(Math.floor(rng() * n));
        } else if (action < 0.85) {
          state.addNodeAt(rng(), rng(), Math.floor(rng() * 6), 6);
        } else if (rng() < 0.5) {
          state.undo();
        } else {
          state.redo();
        }
        const emitted = state.emitGraph();
        expect(validateGraph(emitted)).toEqual([]);
      }
    }
  });
});
