/**
 * Scorer server entry point.
 *
 *   node dist/src/main.js --transport stdio --backend table:fixture.tbl
 *   node dist/src/main.js --transport tcp --port 7070 --backend table:fixture.tbl
 *
 * stdio mode answers requests on stdout until stdin closes, then exits 0.
 * TCP mode serves each connection independently, requests serialized per
 * connection.
 */

import fs from "node:fs";
import net from "node:net";
import readline from "node:readline";

import { handleRequestLine } from "./protocol.js";
import { TableScorer } from "./table.js";

interface Args {
  transport: "stdio" | "tcp";
  port: number;
  backend: string;
  logLevel: string;
}

function parseArgs(argv: string[]): Args {
  const args: Args = { transport: "stdio", port: 7070, backend: "", logLevel: "warn" };
  for (let i = 0; i < argv.length; i++) {
    const flag = argv[i];
    const next = () => {
      i += 1;
      if (i >= argv.length) throw new Error(`missing value for ${flag}`);
      return argv[i];
    };
    switch (flag) {
      case "--transport": {
        const value = next();
        if (value !== "stdio" && value !== "tcp") throw new Error(`bad transport ${value}`);
        args.transport = value;
        break;
      }
      case "--port":
        args.port = Number(next());
        break;
      case "--backend":
        args.backend = next();
        break;
      case "--log-level":
        args.logLevel = next();
        break;
      default:
        throw new Error(`unknown flag ${flag}`);
    }
  }
  if (!args.backend) throw new Error("--backend table:<path> is required");
  return args;
}

function loadBackend(spec: string): TableScorer {
  const colon = spec.indexOf(":");
  const kind = colon < 0 ? spec : spec.slice(0, colon);
  const rest = colon < 0 ? "" : spec.slice(colon + 1);
  if (kind === "table") {
    return TableScorer.parse(fs.readFileSync(rest, "utf-8"), rest);
  }
  // A causal-LM backend would adapt model logits onto this same surface;
  // only the table backend ships here.
  throw new Error(`unknown backend ${kind} (expected table:<path>)`);
}

function serveStdio(scorer: TableScorer): void {
  const rl = readline.createInterface({ input: process.stdin, crlfDelay: Infinity });
  rl.on("line", (line: string) => {
    if (!line.trim()) return;
    process.stdout.write(handleRequestLine(line, scorer) + "\n");
  });
  rl.on("close", () => process.exit(0));
}

function serveTcp(scorer: TableScorer, port: number): void {
  const server = net.createServer((socket) => {
    const rl = readline.createInterface({ input: socket, crlfDelay: Infinity });
    rl.on("line", (line: string) => {
      if (!line.trim()) return;
      socket.write(handleRequestLine(line, scorer) + "\n");
    });
    socket.on("error", () => socket.destroy());
  });
  server.listen(port, "127.0.0.1", () => {
    const address = server.address();
    const bound = typeof address === "object" && address !== null ? address.port : port;
    process.stderr.write(`listening on 127.0.0.1:${bound}\n`);
  });
}

function main(): void {
  let args: Args;
  try {
    args = parseArgs(process.argv.slice(2));
  } catch (err) {
    process.stderr.write(`usage error: ${err instanceof Error ? err.message : err}\n`);
    process.exit(1);
  }
  let scorer: TableScorer;
  try {
    scorer = loadBackend(args.backend);
  } catch (err) {
    process.stderr.write(`backend error: ${err instanceof Error ? err.message : err}\n`);
    process.exit(1);
  }
  if (args.transport === "stdio") {
    serveStdio(scorer);
  } else {
    serveTcp(scorer, args.port);
  }
}

main();
