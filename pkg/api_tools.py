# api_tools.py
"""
VLM 服务的 HTTP 客户端。

请求体（schema 版本 v1）：
    {"model": str,
     "messages": [{"role": "system"|"user"|"assistant",
                   "content": [{"type": "text", "text": str} |
                               {"type": "image", "media_type": "image/png", "data": base64}]}],
     "max_tokens": int}
响应体：{"text": str}

超时、传输失败、5xx/429 会按指数退避重试；最终失败时分别抛出
VlmTimeoutError、VlmTransportError、VlmStatusError。
"""
import base64
import io
import logging
import random
import time
from typing import List, Literal, Optional, Union

import numpy as np
import requests
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from config import VLM_BACKOFF_MS, VLM_BASE_URL, VLM_MAX_RETRIES, VLM_MAX_TOKENS, VLM_MODEL, VLM_TIMEOUT_MS
from data_models import Observation, PromptRound
from errors import VlmError, VlmStatusError, VlmTimeoutError, VlmTransportError

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "v1"
COMPLETIONS_PATH = "/v1/completions"
RETRY_STATUS = {429, 500, 502, 503, 504}


class VlmEndpointConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    base_url: str = VLM_BASE_URL
    timeout_ms: int = Field(VLM_TIMEOUT_MS, gt=0)
    max_retries: int = Field(VLM_MAX_RETRIES, ge=0)
    backoff_ms: int = Field(VLM_BACKOFF_MS, ge=0)
    model: str = VLM_MODEL
    max_tokens: int = Field(VLM_MAX_TOKENS, gt=0)

    @property
    def url(self) -> str:
        return self.base_url.rstrip("/") + COMPLETIONS_PATH


class TextPart(BaseModel):
    type: Literal["text"] = "text"
    text: str


class ImagePart(BaseModel):
    type: Literal["image"] = "image"
    media_type: str = "image/png"
    data: str


class VlmMessage(BaseModel):
    role: Literal["system", "user", "assistant"]
    content: List[Union[TextPart, ImagePart]]


class VlmRequest(BaseModel):
    model: str
    messages: List[VlmMessage]
    max_tokens: int


class VlmResponse(BaseModel):
    text: str


def encode_png(image: Union[Observation, np.ndarray]) -> bytes:
    """观测图像编码为 PNG 字节。"""
    array = image.array if isinstance(image, Observation) else np.asarray(image, dtype=np.uint8)
    buffer = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(array)).save(buffer, format="PNG")
    return buffer.getvalue()


def build_request(config: VlmEndpointConfig, round: PromptRound) -> VlmRequest:
    messages = [VlmMessage(role=m.role, content=[TextPart(text=m.content)]) for m in round.messages]
    if round.image is not None:
        messages[-1].content.append(ImagePart(data=base64.b64encode(round.image).decode("ascii")))
    return VlmRequest(model=config.model, messages=messages, max_tokens=config.max_tokens)


def _backoff(config: VlmEndpointConfig, attempt: int, rng: random.Random) -> float:
    """第 attempt 次重试前的等待秒数：backoff·2^attempt 加上至多一个 backoff 的抖动。"""
    base = config.backoff_ms / 1000.0
    return base * (2 ** attempt) + rng.uniform(0.0, base)


def query_vlm(config: VlmEndpointConfig, round: PromptRound, session: Optional[requests.Session] = None,
              rng: Optional[random.Random] = None) -> str:
    """发送一轮对话并返回补全文本。"""
    payload = build_request(config, round).model_dump(mode="json")
    http = session or requests.Session()
    rng = rng or random.Random()
    last_error: Optional[VlmError] = None

    for attempt in range(config.max_retries + 1):
        if attempt:
            wait = _backoff(config, attempt - 1, rng)
            logger.warning(f"⚠️ VLM 请求失败（{last_error}），{wait:.2f} 秒后第 {attempt} 次重试")
            time.sleep(wait)
        try:
            response = http.post(config.url, json=payload, timeout=config.timeout_ms / 1000.0,
                                 headers={"X-Schema-Version": SCHEMA_VERSION})
        except requests.exceptions.Timeout as e:
            last_error = VlmTimeoutError(f"VLM 请求超时（{config.timeout_ms} ms）: {e}")
            continue
        except requests.exceptions.RequestException as e:
            last_error = VlmTransportError(f"无法连接 VLM 服务 {config.url}: {e}")
            continue

        if response.status_code in RETRY_STATUS:
            last_error = VlmStatusError(response.status_code, response.text)
            continue
        if not response.ok:
            # 其余 4xx 不重试
            raise VlmStatusError(response.status_code, response.text)
        try:
            return VlmResponse.model_validate(response.json()).text
        except (ValueError, ValidationError) as e:
            raise VlmError(f"VLM 响应不符合 schema: {e}") from e

    logger.error(f"❌ VLM 请求在 {config.max_retries} 次重试后仍失败")
    raise last_error
