#!/usr/bin/env python3
"""Definition generation, LLM-as-judge scoring, and reporting, fully offline.

Stands up a tiny scripted chat endpoint on localhost, runs the
generate -> judge -> report pipeline against it, and prints the
resulting Markdown table.
"""

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from mergeforge.harness import (
    EndpointConfig,
    generate_definitions,
    judge_definitions,
)
from mergeforge.reporting import compute_stats, report_table
from mergeforge.vocab import TermEntry

# prompt substring -> scripted reply: definitions for the two models,
# scores for the judge
SCRIPT = [
    ("term 'sclera'", "The tough white outer layer of the eyeball."),
    ("term 'azygos'", "A vein along the right side of the thoracic spine."),
    ("Term (English): sclera", "score: 9"),
    ("Term (English): azygos", "score: 7"),
]


class ScriptedHandler(BaseHTTPRequestHandler):
    def log_message(self, *args) -> None:
        pass

    def do_POST(self) -> None:
        length = int(self.headers.get("Content-Length", "0"))
        prompt = json.loads(self.rfile.read(length))["messages"][0]["content"]
        text = next((reply for key, reply in SCRIPT if key in prompt), "score: 5")
        body = json.dumps(
            {"choices": [{"message": {"role": "assistant", "content": text}}]}
        ).encode("utf-8")
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)


def main() -> None:
    httpd = ThreadingHTTPServer(("127.0.0.1", 0), ScriptedHandler)
    threading.Thread(target=httpd.serve_forever, daemon=True).start()
    host, port = httpd.server_address[:2]
    base_url = f"http://{host}:{port}"
    print("scripted endpoint at", base_url)

    terms = [TermEntry("sclera", "noun", "強膜"), TermEntry("azygos", "noun", "奇静脈")]

    # same endpoint plays both the candidate model and the expert
    candidate = EndpointConfig(base_url, "merged-7b")
    expert = EndpointConfig(base_url, "expert-13b")
    definitions = generate_definitions(candidate, terms, language="en")
    references = {
        r.term_en: r
        for r in generate_definitions(expert, terms, language="en", is_reference=True)
    }
    for record in definitions:
        print(f"{record.model_id} on {record.term_en}: {record.definition}")

    judge = EndpointConfig(base_url, "judge-1")
    valid, invalid = judge_definitions(judge, definitions, references)
    for score in valid:
        print(f"{score.judge_id} scored {score.term_en}: {score.score}")
    if invalid:
        print("unparseable judgements:", len(invalid))

    scores = [s.score for s in valid]
    print("\n" + report_table({"merged-7b": {"judge-1": compute_stats(scores)}}))
    httpd.shutdown()
    httpd.server_close()


if __name__ == "__main__":
    main()
