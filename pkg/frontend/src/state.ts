import type { ClusterView, Progress } from './types.js';

export interface UiSessionState {
  view: ClusterView | null;
  done: boolean;
  selectedClass: number | null;
  excluded: Set<number>;
  focusIndex: number; // member cursor for keyboard exclusion
  progress: Progress;
  pending: boolean; // at most one in-flight decision
  offline: boolean;
  queued: number;
  message: string | null;
}

export function emptyProgress(): Progress {
  return { decided: 0, remaining: 0, masks_labeled: 0, per_stage: {}, per_class: {} };
}

export function purityBadge(purity: number): string {
  return `${Math.round(purity * 100)}%`;
}

export function initialState(): UiSessionState {
  return {
    view: null,
    done: false,
    selectedClass: null,
    excluded: new Set(),
    focusIndex: 0,
    progress: emptyProgress(),
    pending: false,
    offline: false,
    queued: 0,
    message: null,
  };
}

/** Optimistic counters for a decision on `view`, reconciled later against
 * the server's progress response. */
export function applyOptimistic(
  progress: Progress,
  view: ClusterView,
  verdict: 'labeled' | 'rejected',
  excludedCount: number,
): Progress {
  const next: Progress = {
    ...progress,
    per_stage: { ...progress.per_stage },
    per_class: { ...progress.per_class },
  };
  next.decided += 1;
  next.remaining = Math.max(0, next.remaining - 1);
  if (verdict === 'labeled') {
    next.masks_labeled += view.members.length - excludedCount;
  }
  const stage = next.per_stage[view.stage];
  if (stage) {
    next.per_stage[view.stage] = { ...stage, decided: stage.decided + 1 };
  }
  return next;
}
