/**
 * Table-backed next-token scorer.
 *
 * Parses the same line-based table format as the in-process Python scorer
 * and reproduces its numerics exactly: rows are divided by their own sum
 * (warning on stderr when the sum is off by more than 1e-9), exact zeros
 * are floored to LOG_FLOOR, and contexts without an explicit row fall back
 * to the DEFAULT row or, failing that, to the uniform distribution.
 */

// Finite stand-in for log(0); the literal is shared with the Python side
// so both implementations floor to the identical double.
export const LOG_FLOOR = -690.7755278982137;

export interface ScorerInfo {
  vocab_size: number;
  image_start: number;
  image_end: number;
  visual_lo: number;
  visual_hi: number;
  supports_tokenize: boolean;
  name: string;
}

export class TableError extends Error {}
export class TokenRangeError extends Error {}
export class UnsupportedOpError extends Error {}
export class BadRequestError extends Error {}

function rowToLogprobs(pairs: Array<[number, number]>, vocabSize: number, where: string): Float64Array {
  let total = 0;
  for (const [tok, prob] of pairs) {
    if (tok < 0 || tok >= vocabSize) {
      throw new TableError(`${where}: token ${tok} outside [0, ${vocabSize})`);
    }
    if (prob < 0) {
      throw new TableError(`${where}: negative probability ${prob} for token ${tok}`);
    }
    total += prob;
  }
  if (total === 0) {
    throw new TableError(`${where}: probabilities sum to zero`);
  }
  if (Math.abs(total - 1.0) > 1e-9) {
    process.stderr.write(`${where}: probabilities sum to ${total}; renormalizing\n`);
  }
  const vec = new Float64Array(vocabSize).fill(LOG_FLOOR);
  for (const [tok, prob] of pairs) {
    const p = prob / total;
    vec[tok] = p > 0 ? Math.log(p) : LOG_FLOOR;
  }
  return vec;
}

export class TableScorer {
  readonly info: ScorerInfo;
  private rows: Map<string, Float64Array>;
  private backoff: Float64Array;
  private words: Map<string, number>;

  constructor(
    info: ScorerInfo,
    rows: Map<string, Float64Array>,
    backoff: Float64Array,
    words: Map<string, number>,
  ) {
    this.info = info;
    this.rows = rows;
    this.backoff = backoff;
    this.words = words;
  }

  static parse(text: string, name: string): TableScorer {
    const infoFields = new Map<string, number>();
    let visual: [number, number] | null = null;
    const rowPairs = new Map<string, Array<[number, number]>>();
    let defaultPairs: Array<[number, number]> | null = null;
    const words = new Map<string, number>();

    const parsePairs = (rowText: string, lineno: number): Array<[number, number]> => {
      const pairs: Array<[number, number]> = [];
      const seen = new Set<number>();
      for (const part of rowText.split(/\s+/).filter(Boolean)) {
        const eq = part.indexOf("=");
        if (eq < 0) throw new TableError(`line ${lineno}: expected token=prob, got ${part}`);
        const tok = Number(part.slice(0, eq));
        const prob = Number(part.slice(eq + 1));
        if (!Number.isInteger(tok) || !Number.isFinite(prob)) {
          throw new TableError(`line ${lineno}: bad token=prob pair ${part}`);
        }
        if (seen.has(tok)) throw new TableError(`line ${lineno}: duplicate token ${tok}`);
        seen.add(tok);
        pairs.push([tok, prob]);
      }
      return pairs;
    };

    const lines = text.split("\n");
    for (let i = 0; i < lines.length; i++) {
      const lineno = i + 1;
      const line = lines[i].trim();
      if (!line || line.startsWith("#")) continue;
      const space = line.indexOf(" ");
      const kind = space < 0 ? line : line.slice(0, space);
      const rest = space < 0 ? "" : line.slice(space + 1);
      if (kind === "INFO") {
        for (const part of rest.split(/\s+/).filter(Boolean)) {
          const eq = part.indexOf("=");
          if (eq < 0) throw new TableError(`line ${lineno}: expected key=value, got ${part}`);
          const key = part.slice(0, eq);
          const value = part.slice(eq + 1);
          if (key === "visual") {
            const dash = value.indexOf("-");
            const lo = Number(value.slice(0, dash));
            const hi = Number(value.slice(dash + 1));
            if (!Number.isInteger(lo) || !Number.isInteger(hi)) {
              throw new TableError(`line ${lineno}: bad visual range ${value}`);
            }
            visual = [lo, hi];
          } else if (key === "name") {
            name = value;
          } else {
            const num = Number(value);
            if (!Number.isInteger(num)) throw new TableError(`line ${lineno}: bad integer ${value}`);
            infoFields.set(key, num);
          }
        }
      } else if (kind === "CTX") {
        const colon = rest.indexOf(":");
        if (colon < 0) throw new TableError(`line ${lineno}: CTX line needs ':'`);
        const ctxTokens = rest
          .slice(0, colon)
          .split(/\s+/)
          .filter(Boolean)
          .map((t) => {
            const v = Number(t);
            if (!Number.isInteger(v)) throw new TableError(`line ${lineno}: non-integer context token`);
            return v;
          });
        const key = ctxTokens.join(",");
        if (rowPairs.has(key)) throw new TableError(`line ${lineno}: duplicate CTX row`);
        rowPairs.set(key, parsePairs(rest.slice(colon + 1), lineno));
      } else if (kind === "DEFAULT") {
        const colon = line.indexOf(":");
        if (colon < 0) throw new TableError(`line ${lineno}: DEFAULT line needs ':'`);
        if (defaultPairs !== null) throw new TableError(`line ${lineno}: duplicate DEFAULT row`);
        defaultPairs = parsePairs(line.slice(colon + 1), lineno);
      } else if (kind === "WORD") {
        const eq = rest.indexOf("=");
        if (eq < 0) throw new TableError(`line ${lineno}: expected WORD string=token`);
        const tok = Number(rest.slice(eq + 1));
        if (!Number.isInteger(tok)) throw new TableError(`line ${lineno}: bad token id`);
        words.set(rest.slice(0, eq).trim(), tok);
      } else {
        throw new TableError(`line ${lineno}: unknown directive ${kind}`);
      }
    }

    for (const required of ["vocab_size", "image_start", "image_end"]) {
      if (!infoFields.has(required)) throw new TableError(`table ${name}: INFO line missing ${required}`);
    }
    if (visual === null) throw new TableError(`table ${name}: INFO line missing visual=<lo>-<hi>`);
    const vocabSize = infoFields.get("vocab_size")!;

    const info: ScorerInfo = {
      vocab_size: vocabSize,
      image_start: infoFields.get("image_start")!,
      image_end: infoFields.get("image_end")!,
      visual_lo: visual[0],
      visual_hi: visual[1],
      supports_tokenize: words.size > 0,
      name,
    };
    const rows = new Map<string, Float64Array>();
    for (const [key, pairs] of rowPairs) {
      rows.set(key, rowToLogprobs(pairs, vocabSize, `row [${key}]`));
    }
    const backoff = defaultPairs
      ? rowToLogprobs(defaultPairs, vocabSize, "default row")
      : new Float64Array(vocabSize).fill(Math.log(1 / vocabSize));
    return new TableScorer(info, rows, backoff, words);
  }

  logprobs(contexts: number[][]): Float64Array[] {
    if (contexts.length === 0) throw new BadRequestError("batch must be non-empty");
    const out: Float64Array[] = [];
    for (const ctx of contexts) {
      if (ctx.length === 0) throw new BadRequestError("contexts must be non-empty");
      for (const tok of ctx) {
        if (!Number.isInteger(tok) || tok < 0 || tok >= this.info.vocab_size) {
          throw new TokenRangeError(`context token ${tok} outside [0, ${this.info.vocab_size})`);
        }
      }
      out.push(this.rows.get(ctx.join(",")) ?? this.backoff);
    }
    return out;
  }

  tokenize(text: string): number[] {
    if (!this.info.supports_tokenize) {
      throw new UnsupportedOpError(`scorer ${this.info.name} has no tokenizer`);
    }
    const tokens: number[] = [];
    for (const word of text.split(/\s+/).filter(Boolean)) {
      const tok = this.words.get(word);
      if (tok === undefined) throw new BadRequestError(`word ${word} not in the fixture vocabulary`);
      tokens.push(tok);
    }
    return tokens;
  }
}
