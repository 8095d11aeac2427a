// Questionnaire ordering and resume logic. Screens run criterion-major
// (all items under IQ, then CIE, then CIKG); the server's per-item status
// decides where a reloaded session picks up.

import type { ItemView } from "./api.js";

export interface Screen {
  item: ItemView;
  criterion: string;
}

export function screenQueue(items: ItemView[], criteria: string[]): Screen[] {
  const queue: Screen[] = [];
  for (const criterion of criteria) {
    for (const item of items) {
      queue.push({ item, criterion });
    }
  }
  return queue;
}

/** Index of the first screen not yet rated server-side; queue.length when done. */
export function resumeIndex(queue: Screen[]): number {
  for (let i = 0; i < queue.length; i++) {
    const screen = queue[i];
    if (screen && !screen.item.status[screen.criterion]) {
      return i;
    }
  }
  return queue.length;
}

export interface CompletionState {
  done: number;
  total: number;
  perCriterion: Record<string, { done: number; total: number }>;
  finished: boolean;
}

export function completionState(items: ItemView[], criteria: string[]): CompletionState {
  const perCriterion: Record<string, { done: number; total: number }> = {};
  let done = 0;
  for (const criterion of criteria) {
    const ratedCount = items.filter((item) => item.status[criterion]).length;
    perCriterion[criterion] = { done: ratedCount, total: items.length };
    done += ratedCount;
  }
  const total = items.length * criteria.length;
  return { done, total, perCriterion, finished: total > 0 && done === total };
}
