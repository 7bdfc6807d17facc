# vlm_stub.py
"""
本地 VLM 桩服务：按脚本返回回复并记录收到的请求，用于无网络环境下测试 wire 客户端。
脚本条目可以指定状态码、回复文本和延迟，用来注入 5xx、超时等故障。
"""
import json
import logging
import threading
import time
from collections import deque
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Deque, Dict, Iterable, List, Optional, Union

from pydantic import BaseModel, ConfigDict

from api_tools import COMPLETIONS_PATH

logger = logging.getLogger(__name__)


class StubReply(BaseModel):
    model_config = ConfigDict(frozen=True)

    text: str = ""
    status: int = 200
    delay_s: float = 0.0
    raw_body: Optional[str] = None  # 非空时原样返回，不包成 {"text": ...}


Responder = Callable[[dict], str]


class VlmStubServer:
    """
    脚本队列非空时依次弹出回复；队列耗尽后交给 responder（默认回复空字符串）。
    用法：
        with VlmStubServer(["...", StubReply(status=500)]) as stub:
            config = VlmEndpointConfig(base_url=stub.base_url)
    """

    def __init__(self, script: Iterable[Union[str, StubReply]] = (), responder: Optional[Responder] = None,
                 host: str = "127.0.0.1", port: int = 0):
        self._script: Deque[StubReply] = deque(r if isinstance(r, StubReply) else StubReply(text=r) for r in script)
        self.responder = responder
        self.requests: List[dict] = []
        self._lock = threading.Lock()
        self._server = ThreadingHTTPServer((host, port), self._handler_class())
        self._server.daemon_threads = True
        self._thread: Optional[threading.Thread] = None

    @property
    def base_url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def enqueue(self, *replies: Union[str, StubReply]) -> None:
        with self._lock:
            self._script.extend(r if isinstance(r, StubReply) else StubReply(text=r) for r in replies)

    def _next_reply(self, payload: dict) -> StubReply:
        with self._lock:
            self.requests.append(payload)
            if self._script:
                return self._script.popleft()
        return StubReply(text=self.responder(payload) if self.responder else "")

    def _handler_class(self):
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                if self.path != COMPLETIONS_PATH:
                    self._send(404, json.dumps({"error": f"unknown path {self.path}"}))
                    return
                length = int(self.headers.get("Content-Length", 0))
                try:
                    payload = json.loads(self.rfile.read(length).decode("utf-8"))
                except (UnicodeDecodeError, json.JSONDecodeError):
                    self._send(400, json.dumps({"error": "invalid json"}))
                    return
                reply = stub._next_reply(payload)
                if reply.delay_s:
                    time.sleep(reply.delay_s)
                body = reply.raw_body if reply.raw_body is not None else json.dumps({"text": reply.text})
                self._send(reply.status, body)

            def _send(self, status: int, body: str) -> None:
                data = body.encode("utf-8")
                try:
                    self.send_response(status)
                    self.send_header("Content-Type", "application/json")
                    self.send_header("Content-Length", str(len(data)))
                    self.end_headers()
                    self.wfile.write(data)
                except (BrokenPipeError, ConnectionResetError):
                    # 客户端已超时断开
                    pass

            def log_message(self, format, *args):
                logger.debug("stub: " + format, *args)

        return Handler

    def start(self) -> "VlmStubServer":
        self._thread = threading.Thread(target=self._server.serve_forever, name="vlm-stub", daemon=True)
        self._thread.start()
        logger.info(f"✅ VLM 桩服务已启动: {self.base_url}")
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5.0)

    def __enter__(self) -> "VlmStubServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    def prompts(self) -> List[str]:
        """每个请求最后一条消息的文本部分。"""
        texts = []
        for payload in self.requests:
            parts = payload["messages"][-1]["content"]
            texts.append("".join(p.get("text", "") for p in parts if p.get("type") == "text"))
        return texts


def stage_of(payload: dict) -> int:
    """根据最后一条提示的内容判断是第几轮。"""
    prompt = "".join(p.get("text", "") for p in payload["messages"][-1]["content"] if p.get("type") == "text")
    if "only can output one" in prompt:
        return 3
    if '"actions": [' in prompt and "Scene: " in prompt:
        return 2
    return 1


def staged_responder(replies: Dict[int, Responder]) -> Responder:
    """按轮次分派回复函数，便于脚本化一个完整的三轮对话。"""
    def respond(payload: dict) -> str:
        return replies[stage_of(payload)](payload)
    return respond
