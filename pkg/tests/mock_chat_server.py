"""In-process chat-completions endpoint for offline tests.

The server answers POST /chat/completions by matching the prompt against
an ordered rule list; the first matching rule wins. Rules are dicts:

    contains    substring the prompt must contain ("" matches anything)
    pattern     optional regex searched in the prompt; capture groups are
                available to the response template as {g1}, {g2}, ...
    response    reply text template (default "")
    responses   list of reply texts served per hit of this rule (the last
                one repeats); overrides `response`
    status      HTTP status (default 200)
    fail_first  serve HTTP 500 for this rule's first N hits, then behave
                normally (for retry tests)
    sleep       seconds to wait before answering

It also records every prompt, the bearer token it saw, and a high-water
mark of concurrently in-flight requests (for concurrency-limit tests).
"""

from __future__ import annotations

import json
import re
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer


class MockChatServer:
    def __init__(self, rules: list[dict]) -> None:
        self.rules = [dict(rule) for rule in rules]
        self._hits = [0] * len(self.rules)
        self._lock = threading.Lock()
        self.prompts: list[str] = []
        self.bodies: list[dict] = []
        self.auth_headers: list[str] = []
        self.request_count = 0
        self.in_flight = 0
        self.max_in_flight = 0
        server = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args) -> None:
                pass

            def do_POST(self) -> None:
                with server._lock:
                    server.in_flight += 1
                    server.max_in_flight = max(server.max_in_flight, server.in_flight)
                try:
                    self._respond()
                finally:
                    with server._lock:
                        server.in_flight -= 1

            def _respond(self) -> None:
                if self.path != "/chat/completions":
                    self.send_error(404)
                    return
                length = int(self.headers.get("Content-Length", "0"))
                body = json.loads(self.rfile.read(length).decode("utf-8"))
                prompt = body["messages"][0]["content"]
                status, text = server._route(body, prompt, self.headers.get("Authorization", ""))
                if status != 200:
                    payload = json.dumps({"error": {"message": "scripted failure"}})
                else:
                    payload = json.dumps(
                        {"choices": [{"message": {"role": "assistant", "content": text}}]},
                        ensure_ascii=False,
                    )
                data = payload.encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

        self._httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)

    def _route(self, body: dict, prompt: str, auth: str) -> tuple[int, str]:
        sleep_for = 0.0
        with self._lock:
            self.request_count += 1
            self.prompts.append(prompt)
            self.bodies.append(body)
            self.auth_headers.append(auth)
            for i, rule in enumerate(self.rules):
                if rule.get("contains", "") not in prompt:
                    continue
                pattern = rule.get("pattern")
                groups: tuple[str, ...] = ()
                if pattern is not None:
                    m = re.search(pattern, prompt)
                    if not m:
                        continue
                    groups = m.groups()
                self._hits[i] += 1
                if self._hits[i] <= rule.get("fail_first", 0):
                    status, text = 500, ""
                else:
                    status = rule.get("status", 200)
                    if "responses" in rule:
                        seq = rule["responses"]
                        past_failures = rule.get("fail_first", 0)
                        text = seq[min(self._hits[i] - past_failures - 1, len(seq) - 1)]
                    else:
                        text = rule.get("response", "")
                    for gi, g in enumerate(groups, start=1):
                        text = text.replace("{g%d}" % gi, g)
                sleep_for = rule.get("sleep", 0.0)
                break
            else:
                status, text = 404, ""
        if sleep_for:
            time.sleep(sleep_for)
        return status, text

    @property
    def base_url(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}"

    def __enter__(self) -> "MockChatServer":
        self._thread.start()
        return self

    def __exit__(self, *exc) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
