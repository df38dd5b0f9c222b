// Typed client for the segmentation session API.

export interface SessionInfo {
  session_id: string;
  n_slices: number;
  height: number;
  width: number;
  n_classes: number;
  click_capacity: number;
  schema_version: number;
}

export interface ClickPayload {
  slice: number;
  row: number;
  col: number;
  class: number;
  polarity: 'pos' | 'neg';
}

export interface ClickResponse {
  round: number;
  per_class_dsc: Record<string, number> | null;
  clicks_used: number;
  schema_version: number;
}

export interface AutoResponse {
  per_class_dsc: Record<string, number> | null;
  schema_version: number;
}

export interface MaskResponse {
  slice: number;
  class: number;
  shape: [number, number];
  rle: number[];
  schema_version: number;
}

export class ApiError extends Error {
  constructor(
    public status: number,
    message: string,
  ) {
    super(message);
  }
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

async function asJson<T>(response: Response): Promise<T> {
  if (!response.ok) {
    let message = response.statusText;
    try {
      const body = (await response.json()) as { error?: string };
      if (body.error) message = body.error;
    } catch {
      // non-JSON error body; keep the status text
    }
    throw new ApiError(response.status, message);
  }
  return (await response.json()) as T;
}

export class SegmentationApi {
  constructor(
    private baseUrl: string,
    private fetchFn: FetchLike = (url, init) => fetch(url, init),
  ) {}

  async createSession(volumePath: string, labelsPath?: string): Promise<SessionInfo> {
    const body: Record<string, string> = { volume_path: volumePath };
    if (labelsPath) body.labels_path = labelsPath;
    const response = await this.fetchFn(`${this.baseUrl}/sessions`, {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify(body),
    });
    return asJson<SessionInfo>(response);
  }

  slicePngUrl(sessionId: string, slice: number): string {
    return `${this.baseUrl}/sessions/${sessionId}/slice/${slice}`;
  }

  async postClick(sessionId: string, click: ClickPayload): Promise<ClickResponse> {
    const response = await this.fetchFn(`${this.baseUrl}/sessions/${sessionId}/clicks`, {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify(click),
    });
    return asJson<ClickResponse>(response);
  }

  async runAuto(sessionId: string): Promise<AutoResponse> {
    const response = await this.fetchFn(`${this.baseUrl}/sessions/${sessionId}/auto`, {
      method: 'POST',
    });
    return asJson<AutoResponse>(response);
  }

  async getMask(sessionId: string, slice: number, classId: number): Promise<MaskResponse> {
    const response = await this.fetchFn(
      `${this.baseUrl}/sessions/${sessionId}/mask/${slice}?class=${classId}`,
    );
    return asJson<MaskResponse>(response);
  }

  async deleteSession(sessionId: string): Promise<void> {
    const response = await this.fetchFn(`${this.baseUrl}/sessions/${sessionId}`, {
      method: 'DELETE',
    });
    await asJson<{ deleted: boolean }>(response);
  }
}
