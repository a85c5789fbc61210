/**
 * Request handling for the newline-delimited JSON scorer protocol.
 *
 * Every request line gets exactly one reply line echoing the request id
 * verbatim; malformed input produces an error reply, never silence.
 */

import {
  BadRequestError,
  TableScorer,
  TokenRangeError,
  UnsupportedOpError,
} from "./table.js";

type RequestId = unknown;

function errorReply(id: RequestId, code: string, message: string): string {
  return JSON.stringify({ id: id === undefined ? null : id, error: code, message });
}

function isIntArray(value: unknown): value is number[] {
  return Array.isArray(value) && value.every((v) => Number.isInteger(v));
}

/** Handle one raw request line; always returns one reply line (no newline). */
export function handleRequestLine(line: string, scorer: TableScorer): string {
  let request: Record<string, unknown>;
  try {
    const parsed: unknown = JSON.parse(line);
    if (typeof parsed !== "object" || parsed === null || Array.isArray(parsed)) {
      return errorReply(null, "bad_request", "request must be a JSON object");
    }
    request = parsed as Record<string, unknown>;
  } catch {
    return errorReply(null, "bad_request", "unparseable JSON");
  }
  const id = request.id;
  try {
    switch (request.op) {
      case "info": {
        return JSON.stringify({ id, ...scorer.info });
      }
      case "logprobs": {
        const contexts = request.contexts;
        if (!Array.isArray(contexts) || contexts.length === 0 || !contexts.every(isIntArray)) {
          return errorReply(id, "bad_request", "contexts must be a non-empty array of int arrays");
        }
        const vectors = scorer.logprobs(contexts as number[][]);
        return JSON.stringify({ id, logprobs: vectors.map((v) => Array.from(v)) });
      }
      case "tokenize": {
        if (typeof request.text !== "string") {
          return errorReply(id, "bad_request", "tokenize needs a string 'text'");
        }
        return JSON.stringify({ id, tokens: scorer.tokenize(request.text) });
      }
      default:
        return errorReply(id, "bad_request", `unknown op ${String(request.op)}`);
    }
  } catch (err) {
    if (err instanceof TokenRangeError) return errorReply(id, "token_out_of_range", err.message);
    if (err instanceof UnsupportedOpError) return errorReply(id, "unsupported", err.message);
    if (err instanceof BadRequestError) return errorReply(id, "bad_request", err.message);
    const message = err instanceof Error ? err.message : String(err);
    return errorReply(id, "internal", message);
  }
}
