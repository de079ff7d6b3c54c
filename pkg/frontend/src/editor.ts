/**
 * Canvas rendering and pointer interactions: nodes at their centroid
 * coordinates, edges as lines, drag to move, right-click menus for
 * delete/change-class on nodes and add-node on empty space.
 */

import { EditorState } from "./state.js";

export const CLASS_COLORS = [
  "#3b3b3b", "#b98a5e", "#d6423c", "#3fa34d", "#3f6fd6", "#e0c23c",
  "#b544c8", "#2fc8c8", "#e08a2f", "#8a5a2f",
];

export const classColor = (classId: number): string =>
  CLASS_COLORS[classId % CLASS_COLORS.length]!;

export interface CanvasHooks {
  onEdit?: () => void;
}

export class GraphCanvas {
  private dragging = false;
  readonly nodeRadius = 14;

  constructor(
    private canvas: HTMLCanvasElement,
    private state: EditorState,
    private hooks: CanvasHooks = {},
  ) {
    canvas.addEventListener("mousedown", (e) => this.onMouseDown(e));
    canvas.addEventListener("mousemove", (e) => this.onMouseMove(e));
    window.addEventListener("mouseup", () => this.onMouseUp());
    canvas.addEventListener("contextmenu", (e) => this.onContextMenu(e));
  }

  toCanvas(cx: number, cy: number): [number, number] {
    return [cx * this.canvas.width, cy * this.canvas.height];
  }

  toGraph(px: number, py: number): [number, number] {
    return [px / this.canvas.width, py / this.canvas.height];
  }

  hitNode(px: number, py: number): number | null {
    const nodes = this.state.graph.nodes;
    for (let i = nodes.length - 1; i >= 0; i--) {
      const [nx, ny] = this.toCanvas(nodes[i]!.centroid[0], nodes[i]!.centroid[1]);
      if (Math.hypot(px - nx, py - ny) <= this.nodeRadius) return i;
    }
    return null;
  }

  private eventPos(e: MouseEvent): [number, number] {
    const rect = this.canvas.getBoundingClientRect();
    return [e.clientX - rect.left, e.clientY - rect.top];
  }

  private onMouseDown(e: MouseEvent): void {
    if (e.button !== 0) return;
    const [px, py] = this.eventPos(e);
    const hit = this.hitNode(px, py);
    if (hit !== null) {
      this.state.beginDrag(hit);
      this.dragging = true;
    } else {
      this.state.selectedNode = null;
    }
    this.draw();
  }

  private onMouseMove(e: MouseEvent): void {
    if (!this.dragging) return;
    const [px, py] = this.eventPos(e);
    const [gx, gy] = this.toGraph(px, py);
    this.state.dragTo(gx, gy);
    this.draw();
  }

  private onMouseUp(): void {
    if (!this.dragging) return;
    this.dragging = false;
    this.state.endDrag();
    this.hooks.onEdit?.();
    this.draw();
  }

  private onContextMenu(e: MouseEvent): void {
    e.preventDefault();
    const [px, py] = this.eventPos(e);
    const hit = this.hitNode(px, py);
    const [gx, gy] = this.toGraph(px, py);
    this.showMenu(e.clientX, e.clientY, hit, [gx, gy]);
  }

  /** Context menu: delete / change class on a node, add node on empty space. */
  showMenu(x: number, y: number, nodeIdx: number | null, graphPos: [number, number]): void {
    document.querySelectorAll(".sg-menu").forEach((el) => el.remove());
    const menu = document.createElement("div");
    menu.className = "sg-menu";
    menu.style.cssText = `position:fixed;left:${x}px;top:${y}px;z-index:10;`;

    const classCount = this.state.classCount || 6;
    const addItem = (label: string, action: () => void) => {
      const item = document.createElement("button");
      item.className = "sg-menu-item";
      item.textContent = label;
      item.addEventListener("click", () => {
        menu.remove();
        action();
        this.hooks.onEdit?.();
        this.draw();
      });
      menu.appendChild(item);
    };

    if (nodeIdx !== null) {
      addItem("Delete node", () => this.state.removeNode(nodeIdx));
      for (let c = 0; c < classCount; c++) {
        if (c === this.state.graph.nodes[nodeIdx]!.class_id) continue;
        addItem(`Change to class ${c}`, () => this.state.changeNodeClass(nodeIdx, c));
      }
    } else {
      for (let c = 0; c < classCount; c++) {
        addItem(`Add class-${c} node`, () =>
          this.state.addNodeAt(graphPos[0], graphPos[1], c, classCount),
        );
      }
    }
    document.body.appendChild(menu);
    const dismiss = () => {
      menu.remove();
      window.removeEventListener("mousedown", dismiss);
    };
    setTimeout(() => window.addEventListener("mousedown", dismiss), 0);
  }

  draw(): void {
    let ctx: CanvasRenderingContext2D | null = null;
    try {
      ctx = this.canvas.getContext("2d");
    } catch {
      return; // no 2D context in headless test environments
    }
    if (!ctx) return;
    const { width, height } = this.canvas;
    ctx.clearRect(0, 0, width, height);
    ctx.fillStyle = "#101418";
    ctx.fillRect(0, 0, width, height);

    const graph = this.state.graph;
    ctx.strokeStyle = "#7d8a99";
    ctx.lineWidth = 1.5;
    for (const [a, b] of graph.edges) {
      const na = graph.nodes[a];
      const nb = graph.nodes[b];
      if (!na || !nb) continue;
      const [ax, ay] = this.toCanvas(na.centroid[0], na.centroid[1]);
      const [bx, by] = this.toCanvas(nb.centroid[0], nb.centroid[1]);
      ctx.beginPath();
      ctx.moveTo(ax, ay);
      ctx.lineTo(bx, by);
      ctx.stroke();
    }

    graph.nodes.forEach((node, i) => {
      const [nx, ny] = this.toCanvas(node.centroid[0], node.centroid[1]);
      ctx.beginPath();
      ctx.arc(nx, ny, this.nodeRadius, 0, 2 * Math.PI);
      ctx.fillStyle = classColor(node.class_id);
      ctx.fill();
      if (i === this.state.selectedNode) {
        ctx.strokeStyle = "#ffffff";
        ctx.lineWidth = 2.5;
        ctx.stroke();
      }
      ctx.fillStyle = "#ffffff";
      ctx.font = "11px sans-serif";
      ctx.textAlign = "center";
      ctx.textBaseline = "middle";
      ctx.fillText(String(node.class_id), nx, ny);
    });
  }
}

/** Render a generated batch as an n-image grid (2x2 for the default four). */
export function renderBatchGrid(container: HTMLElement, images: string[]): void {
  container.innerHTML = "";
  container.classList.add("batch-grid");
  for (const payload of images) {
    const img = document.createElement("img");
    img.src = `data:image/png;base64,${payload}`;
    img.className = "batch-image";
    container.appendChild(img);
  }
}
