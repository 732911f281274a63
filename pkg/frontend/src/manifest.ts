// Manifest handling for the heat-map triage bundle.
//
// The manifest is JSON lines; each row carries
//   {id, patch, time_step, jm_value, category, category_source, image}
// The reviewer may only change category / category_source, and saving must
// keep every other byte of the file identical, so edits are applied as
// targeted string substitutions on the original line rather than by
// re-serializing the JSON.

export type Category = "type-I" | "type-II" | "uncategorized";
export type CategorySource = "jm-auto" | "human";

export interface ManifestRecord {
  id: string;
  patch: string;
  time_step: number;
  jm_value: number | null;
  category: Category;
  category_source: CategorySource;
  image: string;
  /** original line, byte-faithful (without trailing newline) */
  raw: string;
}

export function parseManifest(text: string): ManifestRecord[] {
  const records: ManifestRecord[] = [];
  for (const line of text.split("\n")) {
    if (!line.trim()) continue;
    const row = JSON.parse(line);
    records.push({
      id: String(row.id),
      patch: String(row.patch),
      time_step: Number(row.time_step),
      jm_value: row.jm_value === null ? null : Number(row.jm_value),
      category: row.category as Category,
      category_source: row.category_source as CategorySource,
      image: String(row.image ?? ""),
      raw: line,
    });
  }
  return records;
}

function replaceField(raw: string, key: string, value: string): string {
  const pattern = new RegExp(`("${key}":\\s*)"[^"]*"`);
  if (!pattern.test(raw)) {
    throw new Error(`manifest line for is missing field ${key}`);
  }
  return raw.replace(pattern, `$1"${value}"`);
}

/** Rewrite one raw line with a new category/source, leaving every other
 * byte as it was. */
export function rewriteLine(raw: string, category: Category,
                            source: CategorySource): string {
  return replaceField(replaceField(raw, "category", category),
                      "category_source", source);
}

export function serializeManifest(records: ManifestRecord[],
                                  decided: Map<string, { category: Category; source: CategorySource }>): string {
  const lines = records.map((rec) => {
    const d = decided.get(rec.id);
    if (!d) return rec.raw;
    return rewriteLine(rec.raw, d.category, d.source);
  });
  return lines.join("\n") + "\n";
}
