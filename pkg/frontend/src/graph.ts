/**
 * Scene-graph model mirroring the service's JSON schema, plus the four edit
 * operations (move / change class / delete / add). Every edit returns a new
 * graph; validation matches what the service enforces on /generate.
 */

export interface SGNode {
  class_id: number;
  class_count: number;
  spread: [number, number];
  centroid: [number, number];
  component_id: number;
}

export interface SceneGraph {
  version: 1;
  size: [number, number]; // [H, W]
  nodes: SGNode[];
  edges: [number, number][]; // canonical pairs, a < b
}

export class GraphEditError extends Error {}

const isInt = (v: unknown): v is number => typeof v === "number" && Number.isInteger(v);

const isUnitPair = (v: unknown): v is [number, number] =>
  Array.isArray(v) &&
  v.length === 2 &&
  v.every((x) => typeof x === "number" && Number.isFinite(x) && x >= 0 && x <= 1);

/** Schema validation; returns a list of problems, empty when valid. */
export function validateGraph(graph: unknown): string[] {
  const problems: string[] = [];
  if (typeof graph !== "object" || graph === null || Array.isArray(graph)) {
    return ["graph must be an object"];
  }
  const g = graph as Record<string, unknown>;
  if (g.version !== 1) problems.push("version must be 1");
  const size = g.size;
  if (!Array.isArray(size) || size.length !== 2 || !size.every((v) => isInt(v) && v >= 1)) {
    problems.push("size must be [H, W] positive integers");
  }
  const nodes = g.nodes;
  if (!Array.isArray(nodes)) {
    problems.push("nodes must be an array");
    return problems;
  }
  let classCount: number | null = null;
  nodes.forEach((raw, i) => {
    if (typeof raw !== "object" || raw === null) {
      problems.push(`nodes[${i}] must be an object`);
      return;
    }
    const node = raw as Record<string, unknown>;
    if (!isInt(node.class_count) || (node.class_count as number) < 1) {
      problems.push(`nodes[${i}].class_count must be a positive integer`);
      return;
    }
    if (classCount === null) classCount = node.class_count as number;
    if (node.class_count !== classCount) problems.push(`nodes[${i}] disagrees on class_count`);
    if (!isInt(node.class_id) || (node.class_id as number) < 0 || (node.class_id as number) >= (node.class_count as number)) {
      problems.push(`nodes[${i}].class_id out of range`);
    }
    if (!isUnitPair(node.spread)) problems.push(`nodes[${i}].spread must lie in [0,1]^2`);
    if (!isUnitPair(node.centroid)) problems.push(`nodes[${i}].centroid must lie in [0,1]^2`);
    if (!isInt(node.component_id)) problems.push(`nodes[${i}].component_id must be an integer`);
  });
  const edges = g.edges;
  if (!Array.isArray(edges)) {
    problems.push("edges must be an array");
    return problems;
  }
  const seen = new Set<string>();
  edges.forEach((raw, i) => {
    if (!Array.isArray(raw) || raw.length !== 2 || !raw.every(isInt)) {
      problems.push(`edges[${i}] must be a pair of node indices`);
      return;
    }
    const [a, b] = raw as [number, number];
    if (a === b) problems.push(`edges[${i}] is a self-loop`);
    if (a < 0 || b < 0 || a >= nodes.length || b >= nodes.length) {
      problems.push(`edges[${i}] references an invalid node index`);
    }
    const key = `${Math.min(a, b)}-${Math.max(a, b)}`;
    if (seen.has(key)) problems.push(`edges[${i}] duplicates ${key}`);
    seen.add(key);
  });
  return problems;
}

export function cloneGraph(graph: SceneGraph): SceneGraph {
  return JSON.parse(JSON.stringify(graph)) as SceneGraph;
}

/** Canonical serialization: fixed key order, sorted edges, no whitespace. */
export function serializeGraph(graph: SceneGraph): string {
  const edges = graph.edges
    .map(([a, b]) => (a < b ? [a, b] : [b, a]))
    .sort((x, y) => x[0]! - y[0]! || x[1]! - y[1]!);
  const nodes = graph.nodes.map((n) => ({
    class_id: n.class_id,
    class_count: n.class_count,
    spread: n.spread,
    centroid: n.centroid,
    component_id: n.component_id,
  }));
  return JSON.stringify({ version: 1, size: graph.size, nodes, edges });
}

function checkIndex(graph: SceneGraph, idx: number): void {
  if (!Number.isInteger(idx) || idx < 0 || idx >= graph.nodes.length) {
    throw new GraphEditError(`node index ${idx} out of range [0, ${graph.nodes.length})`);
  }
}

export function moveNode(graph: SceneGraph, idx: number, centroid: [number, number]): SceneGraph {
  checkIndex(graph, idx);
  if (!isUnitPair(centroid)) throw new GraphEditError(`centroid ${centroid} outside [0,1]^2`);
  const out = cloneGraph(graph);
  out.nodes[idx]!.centroid = [centroid[0], centroid[1]];
  return out;
}

export function changeClass(graph: SceneGraph, idx: number, classId: number): SceneGraph {
  checkIndex(graph, idx);
  const node = graph.nodes[idx]!;
  if (!Number.isInteger(classId) || classId < 0 || classId >= node.class_count) {
    throw new GraphEditError(`class ${classId} out of range [0, ${node.class_count})`);
  }
  const out = cloneGraph(graph);
  out.nodes[idx]!.class_id = classId;
  return out;
}

export function deleteNode(graph: SceneGraph, idx: number): SceneGraph {
  checkIndex(graph, idx);
  const out = cloneGraph(graph);
  out.nodes.splice(idx, 1);
  out.edges = graph.edges
    .filter(([a, b]) => a !== idx && b !== idx)
    .map(([a, b]): [number, number] => [a > idx ? a - 1 : a, b > idx ? b - 1 : b])
    .map(([a, b]): [number, number] => (a < b ? [a, b] : [b, a]));
  return out;
}

export function addNode(graph: SceneGraph, node: SGNode, neighbors: number[] = []): SceneGraph {
  if (graph.nodes.length > 0 && node.class_count !== graph.nodes[0]!.class_count) {
    throw new GraphEditError("class_count mismatch with existing nodes");
  }
  if (!isUnitPair(node.centroid) || !isUnitPair(node.spread)) {
    throw new GraphEditError("node centroid/spread outside [0,1]^2");
  }
  if (node.class_id < 0 || node.class_id >= node.class_count) {
    throw new GraphEditError("node class_id out of range");
  }
  const newIdx = graph.nodes.length;
  for (const other of neighbors) {
    if (!Number.isInteger(other) || other < 0 || other >= newIdx) {
      throw new GraphEditError(`neighbor index ${other} out of range [0, ${newIdx})`);
    }
  }
  const out = cloneGraph(graph);
  out.nodes.push({ ...node, spread: [...node.spread], centroid: [...node.centroid] });
  for (const other of neighbors) out.edges.push([Math.min(other, newIdx), Math.max(other, newIdx)]);
  return out;
}

export const clamp01 = (v: number): number => Math.min(1, Math.max(0, v));
