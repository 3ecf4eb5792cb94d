/** Typed client for the prediction service JSON contract.
 *
 * The UI performs no numeric model computation: every risk and attention
 * value rendered anywhere is taken verbatim from one of these responses.
 * Concurrent fetches of the same resource are deduplicated.
 */

export interface PatientSummary {
  patient_id: string;
  num_visits: number;
  first_visit: string;
  last_visit: string;
  outcome?: string | null;
}

export interface PatientPage {
  patients: PatientSummary[];
  total: number;
  offset: number;
  limit: number;
}

export interface VisitPoint {
  visit_index: number;
  date: string;
  risk: number;
  /** feature name -> attention weight; weights of one visit sum to 1 */
  attention: Record<string, number>;
  /** feature name -> measured value; null where the lab was not recorded */
  values: Record<string, number | null>;
}

export interface Trajectory {
  patient_id: string;
  feature_names: string[];
  visits: VisitPoint[];
  outcome?: { status: string; death_date?: string | null; cause_of_death?: string | null };
}

export interface CurveBin {
  center: number;
  count: number;
  mean_attention: number;
  mean_risk: number;
}

export interface FeatureCurve {
  bin_width: number;
  range: [number, number];
  bins: CurveBin[];
  shape: string;
  turning_point: number | null;
  recommendation: string | null;
  reference_range?: [number, number] | null;
}

export interface Heatmap {
  features: string[];
  groups: Record<string, { num_visits: number; attention: Record<string, number> }>;
  notices: string[];
}

export interface Statistics {
  curves: Record<string, FeatureCurve>;
  heatmap: Heatmap;
}

export interface PredictVisitInput {
  date: string;
  values: Record<string, number | null>;
}

export interface PredictRequest {
  baseline: Record<string, number>;
  visits: PredictVisitInput[];
}

export interface PredictResponse {
  feature_names: string[];
  visits: VisitPoint[];
}

export interface PredictValidationDetail {
  missing_baseline?: string[];
  unknown_baseline?: string[];
  unknown_features?: string[];
  errors?: string[];
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    message: string,
    readonly detail?: PredictValidationDetail,
  ) {
    super(message);
  }
}

export class ApiClient {
  private inflight = new Map<string, Promise<unknown>>();

  constructor(
    private readonly base: string = "",
    private readonly fetchFn: typeof fetch = fetch,
    private readonly token?: string,
  ) {}

  private headers(json = false): Record<string, string> {
    const h: Record<string, string> = {};
    if (json) h["Content-Type"] = "application/json";
    if (this.token) h["Authorization"] = `Bearer ${this.token}`;
    return h;
  }

  /** GET with per-URL deduplication: concurrent callers share one request. */
  private getJson<T>(path: string): Promise<T> {
    const url = this.base + path;
    const pending = this.inflight.get(url);
    if (pending) return pending as Promise<T>;
    const req = (async () => {
      try {
        const res = await this.fetchFn(url, { headers: this.headers() });
        if (!res.ok) {
          throw new ApiError(res.status, await safeDetailText(res));
        }
        return (await res.json()) as T;
      } finally {
        this.inflight.delete(url);
      }
    })();
    this.inflight.set(url, req);
    return req;
  }

  listPatients(offset = 0, limit = 50): Promise<PatientPage> {
    return this.getJson(`/api/patients?offset=${offset}&limit=${limit}`);
  }

  trajectory(patientId: string, activation?: string): Promise<Trajectory> {
    const q = activation ? `?activation=${encodeURIComponent(activation)}` : "";
    return this.getJson(`/api/patients/${encodeURIComponent(patientId)}/trajectory${q}`);
  }

  statistics(): Promise<Statistics> {
    return this.getJson("/api/statistics/features");
  }

  async predict(payload: PredictRequest): Promise<PredictResponse> {
    const res = await this.fetchFn(this.base + "/api/predict", {
      method: "POST",
      headers: this.headers(true),
      body: JSON.stringify(payload),
    });
    if (!res.ok) {
      let detail: PredictValidationDetail | undefined;
      let message = `predict failed (${res.status})`;
      try {
        const body = await res.json();
        if (body && typeof body.detail === "object") detail = body.detail;
        else if (typeof body.detail === "string") message = body.detail;
      } catch {
        /* non-JSON error body; keep the generic message */
      }
      throw new ApiError(res.status, message, detail);
    }
    return (await res.json()) as PredictResponse;
  }
}

async function safeDetailText(res: Response): Promise<string> {
  try {
    const body = await res.json();
    if (typeof body.detail === "string") return body.detail;
    return JSON.stringify(body.detail ?? body);
  } catch {
    return `${res.status} ${res.statusText}`;
  }
}
