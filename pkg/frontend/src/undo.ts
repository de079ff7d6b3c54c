/** Snapshot-based undo/redo: exact restoration of any prior state. */

export class UndoStack<T> {
  private past: string[] = [];
  private future: string[] = [];

  constructor(private current: T) {}

  get value(): T {
    return this.current;
  }

  /** Register a new state; clears the redo branch. */
  push(next: T): void {
    this.past.push(JSON.stringify(this.current));
    this.future = [];
    this.current = next;
  }

  canUndo(): boolean {
    return this.past.length > 0;
  }

  canRedo(): boolean {
    return this.future.length > 0;
  }

  undo(): T {
    const prev = this.past.pop();
    if (prev === undefined) return this.current;
    this.future.push(JSON.stringify(this.current));
    this.current = JSON.parse(prev) as T;
    return this.current;
  }

  redo(): T {
    const next = this.future.pop();
    if (next === undefined) return this.current;
    this.past.push(JSON.stringify(this.current));
    this.current = JSON.parse(next) as T;
    return this.current;
  }

  /** Replace the whole history (e.g. after loading a new graph). */
  reset(state: T): void {
    this.past = [];
    this.future = [];
    this.current = state;
  }
}
