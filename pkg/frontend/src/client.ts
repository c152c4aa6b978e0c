import type {
  DecisionPayload,
  NextResponse,
  Progress,
  Schema,
} from './types.js';

/** Connectivity failure (server unreachable), as opposed to an HTTP error. */
export class NetworkError extends Error {
  constructor(message = 'network unreachable') {
    super(message);
    this.name = 'NetworkError';
  }
}

/** HTTP-level rejection carrying the server's {error, message} body. */
export class HttpError extends Error {
  constructor(
    public readonly status: number,
    message: string,
  ) {
    super(message);
    this.name = 'HttpError';
  }
}

export interface Transport {
  get(path: string): Promise<unknown>;
  post(path: string, body: unknown): Promise<unknown>;
}

export function fetchTransport(base = ''): Transport {
  async function request(path: string, init?: RequestInit): Promise<unknown> {
    let resp: Response;
    try {
      resp = await fetch(base + path, init);
    } catch {
      throw new NetworkError();
    }
    const body = await resp.json().catch(() => ({}));
    if (!resp.ok) {
      throw new HttpError(resp.status, (body as { message?: string }).message ?? resp.statusText);
    }
    return body;
  }
  return {
    get: (path) => request(path),
    post: (path, body) =>
      request(path, {
        method: 'POST',
        headers: { 'content-type': 'application/json' },
        body: JSON.stringify(body),
      }),
  };
}

interface QueuedDecision {
  clusterId: number;
  payload: DecisionPayload;
}

export const OFFLINE_QUEUE_CAP = 50;

/**
 * API client with a bounded offline queue. Failed decision posts are queued
 * (up to OFFLINE_QUEUE_CAP) and replayed in order by flush(); beyond the cap
 * submissions are refused so the UI can never diverge unboundedly from the
 * durable log.
 */
export class ApiClient {
  private queue: QueuedDecision[] = [];

  constructor(private readonly transport: Transport) {}

  get queuedCount(): number {
    return this.queue.length;
  }

  get queueFull(): boolean {
    return this.queue.length >= OFFLINE_QUEUE_CAP;
  }

  schema(): Promise<Schema> {
    return this.transport.get('/api/schema') as Promise<Schema>;
  }

  next(after: number): Promise<NextResponse> {
    return this.transport.get(`/api/clusters/next?after=${after}`) as Promise<NextResponse>;
  }

  progress(): Promise<Progress> {
    return this.transport.get('/api/progress') as Promise<Progress>;
  }

  /**
   * Post one decision. Returns the server progress, or null when the server
   * was unreachable and the decision went to the offline queue instead.
   * Throws HttpError on a server-side rejection (nothing is queued) and
   * Error('queue full') when the offline cap is reached.
   */
  async decide(clusterId: number, payload: DecisionPayload): Promise<Progress | null> {
    if (this.queueFull) {
      throw new Error('queue full');
    }
    try {
      const progress = await this.transport.post(
        `/api/clusters/${clusterId}/decision`,
        payload,
      );
      return progress as Progress;
    } catch (err) {
      if (err instanceof NetworkError) {
        this.queue.push({ clusterId, payload });
        return null;
      }
      throw err;
    }
  }

  /**
   * Replay queued decisions in order. Stops at the first connectivity
   * failure (leaving the rest queued); server-side rejections are dropped
   * with a console warning since retrying cannot fix them.
   */
  async flush(): Promise<Progress | null> {
    let latest: Progress | null = null;
    while (this.queue.length > 0) {
      const { clusterId, payload } = this.queue[0];
      try {
        latest = (await this.transport.post(
          `/api/clusters/${clusterId}/decision`,
          payload,
        )) as Progress;
        this.queue.shift();
      } catch (err) {
        if (err instanceof NetworkError) {
          return latest;
        }
        console.warn(`dropping rejected queued decision for cluster ${clusterId}:`, err);
        this.queue.shift();
      }
    }
    return latest;
  }
}
