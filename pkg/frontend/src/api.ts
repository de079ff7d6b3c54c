/** Typed client for the generation service. */

import { SceneGraph } from "./graph.js";

export interface GraphListEntry {
  id: string;
  thumbnail: string;
}

export interface GraphEntry {
  id: string;
  graph: SceneGraph;
  image_ref: string | null;
}

export interface GenerateMetadata {
  seed: number;
  omega: number;
  n: number;
  model_checksum: string | null;
}

export interface GenerateResult {
  images: string[]; // base64 PNG payloads
  metadata: GenerateMetadata;
}

export class ServiceError extends Error {
  constructor(message: string, public status: number, public detail?: unknown) {
    super(message);
  }
}

async function parseError(response: Response): Promise<never> {
  let detail: unknown = null;
  try {
    detail = (await response.json()).detail;
  } catch {
    /* non-JSON error body */
  }
  throw new ServiceError(`service responded ${response.status}`, response.status, detail);
}

export class ServiceClient {
  constructor(private baseUrl: string = "", private fetchFn: typeof fetch = fetch) {}

  async listGraphs(): Promise<GraphListEntry[]> {
    const response = await this.fetchFn(`${this.baseUrl}/graphs`);
    if (!response.ok) await parseError(response);
    return (await response.json()).graphs as GraphListEntry[];
  }

  async getGraph(id: string): Promise<GraphEntry> {
    const response = await this.fetchFn(`${this.baseUrl}/graphs/${id}`);
    if (!response.ok) await parseError(response);
    return (await response.json()) as GraphEntry;
  }

  /** Exact request shape of POST /generate. */
  buildGenerateRequest(graph: SceneGraph, n: number, omega: number, seed?: number) {
    return { graph, n, omega, ...(seed !== undefined ? { seed } : {}) };
  }

  async generate(
    graph: SceneGraph,
    n = 4,
    omega = 2.0,
    seed?: number,
  ): Promise<GenerateResult> {
    const response = await this.fetchFn(`${this.baseUrl}/generate`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(this.buildGenerateRequest(graph, n, omega, seed)),
    });
    if (!response.ok) await parseError(response);
    return (await response.json()) as GenerateResult;
  }
}
