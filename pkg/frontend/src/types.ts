// JSON contracts of the annotation server. Field names mirror the API exactly.

export interface SchemaClass {
  id: number;
  name: string;
  color: [number, number, number];
}

export interface Schema {
  name: string;
  classes: SchemaClass[];
  ignore_id: number;
}

export interface MemberSummary {
  id: number;
  tile: [number, number];
  bbox: [number, number, number, number];
  area: number;
  thumbnail: string;
}

export interface DecidedInfo {
  verdict: 'labeled' | 'rejected';
  class_id: number | null;
  excluded_member_ids: number[];
}

export interface ClusterView {
  cluster_id: number;
  stage: 'small' | 'large';
  suggested_class: { id: number; name: string };
  purity: number;
  members: MemberSummary[];
  decided: DecidedInfo | null;
}

export interface QueueDone {
  done: true;
  remaining: 0;
}

export type NextResponse = ClusterView | QueueDone;

export function isDone(resp: NextResponse): resp is QueueDone {
  return (resp as QueueDone).done === true;
}

export interface Progress {
  decided: number;
  remaining: number;
  masks_labeled: number;
  per_stage: Record<string, { total: number; decided: number }>;
  per_class: Record<string, number>;
}

export interface DecisionPayload {
  verdict: 'labeled' | 'rejected';
  class?: number;
  excluded?: number[];
  annotator?: string;
  timestamp?: number;
}

export interface ApiError {
  error: number;
  message: string;
}
