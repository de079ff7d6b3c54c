/**
 * Editor state: the client-side graph copy with undo/redo, selection, and
 * the last generated batch. Every mutation goes через one of the edit
 * actions, so the held graph is schema-valid after every step; edits stay
 * local until a generate request ships them to the service.
 */

import {
  SceneGraph,
  SGNode,
  addNode,
  changeClass,
  clamp01,
  cloneGraph,
  deleteNode,
  moveNode,
  serializeGraph,
  validateGraph,
} from "./graph.js";
import { GenerateResult } from "./api.js";
import { UndoStack } from "./undo.js";

/** UX defaults recorded as config (spread of nodes added by clicking). */
export const EDITOR_DEFAULTS = {
  addNodeSpread: [0.1, 0.1] as [number, number],
  batchSize: 4,
  omega: 2.0,
};

export class EditorState {
  private stack: UndoStack<SceneGraph>;
  selectedNode: number | null = null;
  groundTruthImage: string | null = null;
  lastBatch: GenerateResult | null = null;
  generating = false;
  notes = "";
  private dragBase: SceneGraph | null = null;

  constructor(graph: SceneGraph) {
    this.assertValid(graph);
    this.stack = new UndoStack(cloneGraph(graph));
  }

  private assertValid(graph: SceneGraph): void {
    const problems = validateGraph(graph);
    if (problems.length) throw new Error(`invalid graph: ${problems.join("; ")}`);
  }

  get graph(): SceneGraph {
    return this.stack.value;
  }

  get classCount(): number {
    return this.graph.nodes.length ? this.graph.nodes[0]!.class_count : 0;
  }

  loadGraph(graph: SceneGraph, imageRef: string | null = null): void {
    this.assertValid(graph);
    this.stack.reset(cloneGraph(graph));
    this.selectedNode = null;
    this.groundTruthImage = imageRef;
    this.lastBatch = null;
  }

  /** Drag lifecycle: continuous preview, a single undo entry per drag. */
  beginDrag(idx: number): void {
    if (idx < 0 || idx >= this.graph.nodes.length) return;
    this.selectedNode = idx;
    this.dragBase = this.graph;
  }

  dragTo(x: number, y: number): void {
    if (this.dragBase === null || this.selectedNode === null) return;
    const preview = moveNode(this.dragBase, this.selectedNode, [clamp01(x), clamp01(y)]);
    // overwrite the current value without growing history until drop
    this.stack.reset(preview);
  }

  endDrag(): void {
    if (this.dragBase === null) return;
    const final = this.graph;
    this.stack.reset(this.dragBase);
    if (serializeGraph(final) !== serializeGraph(this.dragBase)) {
      this.stack.push(final);
    }
    this.dragBase = null;
  }

  move(idx: number, centroid: [number, number]): void {
    this.stack.push(moveNode(this.graph, idx, [clamp01(centroid[0]), clamp01(centroid[1])]));
  }

  changeNodeClass(idx: number, classId: number): void {
    this.stack.push(changeClass(this.graph, idx, classId));
  }

  removeNode(idx: number): void {
    this.stack.push(deleteNode(this.graph, idx));
    if (this.selectedNode === idx) this.selectedNode = null;
    else if (this.selectedNode !== null && this.selectedNode > idx) this.selectedNode -= 1;
  }

  /** Right-click on empty canvas: add a node at the click position. */
  addNodeAt(x: number, y: number, classId: number, classCount?: number): void {
    const count = classCount ?? this.classCount;
    if (count < 1) throw new Error("class count unknown for an empty graph");
    const node: SGNode = {
      class_id: classId,
      class_count: count,
      spread: [...EDITOR_DEFAULTS.addNodeSpread] as [number, number],
      centroid: [clamp01(x), clamp01(y)],
      component_id: -1,
    };
    this.stack.push(addNode(this.graph, node));
  }

  undo(): void {
    this.stack.undo();
    this.selectedNode = null;
  }

  redo(): void {
    this.stack.redo();
    this.selectedNode = null;
  }

  canUndo(): boolean {
    return this.stack.canUndo();
  }

  canRedo(): boolean {
    return this.stack.canRedo();
  }

  /** The exact JSON object shipped inside /generate. */
  emitGraph(): SceneGraph {
    const graph = JSON.parse(serializeGraph(this.graph)) as SceneGraph;
    this.assertValid(graph);
    return graph;
  }
}
