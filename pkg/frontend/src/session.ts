// Review-session state: which records exist, in review order, what the
// reviewer decided, and how to write those decisions back.

import {
  Category,
  CategorySource,
  ManifestRecord,
  parseManifest,
  serializeManifest,
} from "./manifest.js";

export type Decision = "keep" | "flip" | "unreviewed";

export interface SessionRecord extends ManifestRecord {
  /** category as the automatic pass left it (restored on undo) */
  autoCategory: Category;
  autoSource: CategorySource;
  decision: Decision;
}

export class TriageSession {
  /** records in review order (least separable first) */
  records: SessionRecord[];
  /** the same records in original manifest order, for faithful saving */
  fileOrder: SessionRecord[];
  cursor = 0;

  constructor(records: SessionRecord[], fileOrder: SessionRecord[]) {
    this.records = records;
    this.fileOrder = fileOrder;
  }

  get current(): SessionRecord | undefined {
    return this.records[this.cursor];
  }

  byId(id: string): SessionRecord {
    const rec = this.records.find((r) => r.id === id);
    if (!rec) throw new Error(`unknown record ${id}`);
    return rec;
  }

  /** Set a category; confirming without change still marks the record human-reviewed. */
  decide(id: string, category: Category): void {
    const rec = this.byId(id);
    rec.decision = category === rec.autoCategory ? "keep" : "flip";
    rec.category = category;
    rec.category_source = "human";
  }

  accept(id: string): void {
    const rec = this.byId(id);
    this.decide(id, rec.category);
  }

  flip(id: string): void {
    const rec = this.byId(id);
    this.decide(id, rec.category === "type-I" ? "type-II" : "type-I");
  }

  /** Restore the automatic category and source. */
  undo(id: string): void {
    const rec = this.byId(id);
    rec.category = rec.autoCategory;
    rec.category_source = rec.autoSource;
    rec.decision = "unreviewed";
  }

  acceptRemaining(): void {
    for (const rec of this.records) {
      if (rec.decision === "unreviewed") this.decide(rec.id, rec.category);
    }
  }

  advance(delta: number): void {
    const n = this.records.length;
    if (n === 0) return;
    this.cursor = Math.min(Math.max(this.cursor + delta, 0), n - 1);
  }

  reviewedCount(): number {
    return this.records.filter((r) => r.decision !== "unreviewed").length;
  }

  /** Manifest text with decisions applied; untouched lines stay byte-identical
   * and the original record order is preserved. */
  save(): string {
    const decided = new Map<string, { category: Category; source: CategorySource }>();
    for (const rec of this.records) {
      if (rec.decision !== "unreviewed") {
        decided.set(rec.id, { category: rec.category, source: rec.category_source });
      }
    }
    return serializeManifest(this.fileOrder, decided);
  }
}

/** Build a session from manifest text plus the set of image files present
 * in the bundle.  Records sort by (time_step, jm ascending, id) so the
 * least separable maps of each date come up first. */
export function loadBundle(manifestText: string,
                           availableImages: Set<string>): TriageSession {
  const parsed = parseManifest(manifestText);
  for (const rec of parsed) {
    if (rec.image && !availableImages.has(rec.image)) {
      throw new Error(`missing image for record ${rec.id}`);
    }
  }
  const fileOrder: SessionRecord[] = parsed.map((rec) => ({
    ...rec,
    autoCategory: rec.category,
    autoSource: rec.category_source,
    decision: "unreviewed" as Decision,
  }));
  const records = [...fileOrder].sort((a, b) => {
    if (a.time_step !== b.time_step) return a.time_step - b.time_step;
    const ja = a.jm_value ?? -Infinity;
    const jb = b.jm_value ?? -Infinity;
    if (ja !== jb) return ja - jb;
    return a.id < b.id ? -1 : a.id > b.id ? 1 : 0;
  });
  return new TriageSession(records, fileOrder);
}
