# vlm_agent.py
"""
wire 模式的原语解析器：把三轮对话串起来。
场景描述和动作列表在一个回合内只问一次，之后每个解析节拍只发第三轮。
第三轮输出无法解析时回退到上一个合法原语。
"""
import logging
from typing import Callable, List, Optional, Tuple

import requests

from api_tools import VlmEndpointConfig, encode_png, query_vlm
from config import ExperimentConfig
from data_models import Observation, PrimitiveAction
from errors import PrimitiveParseError
from primitives import parse_action_list, parse_new_instruction_output, parse_vlm_output
from prompts import build_prompt_rounds

logger = logging.getLogger(__name__)


class WirePrimitiveParser:
    def __init__(self, instruction: str, config: Optional[VlmEndpointConfig] = None,
                 session: Optional[requests.Session] = None):
        self.instruction = instruction
        self.config = config or VlmEndpointConfig()
        self.session = session or requests.Session()
        self.scene: Optional[str] = None
        self.actions_text: Optional[str] = None
        self.actions: List[PrimitiveAction] = []
        self.last: Optional[PrimitiveAction] = None
        self.fallbacks = 0
        self.queries = 0

    def _ask(self, round_) -> str:
        self.queries += 1
        return query_vlm(self.config, round_, self.session)

    def describe_scene(self, observation: Optional[Observation] = None) -> str:
        image = encode_png(observation) if observation is not None else None
        self.scene = self._ask(build_prompt_rounds(self.instruction, 1, image=image)).strip()
        return self.scene

    def list_actions(self) -> List[PrimitiveAction]:
        if self.scene is None:
            self.describe_scene()
        self.actions_text = self._ask(build_prompt_rounds(self.instruction, 2, {"scene": self.scene})).strip()
        try:
            self.actions = parse_action_list(self.actions_text)
        except PrimitiveParseError:
            logger.warning("⚠️ 第二轮回复里没有 actions 列表，按原文传给第三轮")
            self.actions = []
        return self.actions

    def decide(self, observation: Optional[Observation] = None) -> PrimitiveAction:
        """第三轮：决定当前原语。前两轮的结果会被缓存。"""
        if self.scene is None:
            self.describe_scene(observation)
        if self.actions_text is None:
            self.list_actions()
        image = encode_png(observation) if observation is not None else None
        round_ = build_prompt_rounds(self.instruction, 3, {"scene": self.scene, "actions": self.actions_text},
                                     image=image)
        reply = self._ask(round_)
        try:
            primitive = parse_vlm_output(reply)
        except PrimitiveParseError as e:
            if self.last is None:
                raise
            self.fallbacks += 1
            logger.warning(f"⚠️ 第三轮输出无法解析，沿用上一个原语 {self.last.kind.value}: {e}")
            return self.last
        self.last = primitive
        return primitive

    def __call__(self, window) -> PrimitiveAction:
        """执行器 parser 阶段的计算函数；window 是带历史的帧窗口。"""
        return self.decide(window.observations[-1])

    def reset(self) -> None:
        self.scene = self.actions_text = None
        self.actions = []
        self.last = None


def rewrite_instruction(task: str, config: Optional[VlmEndpointConfig] = None,
                        session: Optional[requests.Session] = None) -> str:
    """新指令模式：让 VLM 把分布外的描述改写成已学技能的指令。"""
    reply = query_vlm(config or VlmEndpointConfig(), build_prompt_rounds(task, 1, mode="new_instruction"), session)
    return parse_new_instruction_output(reply)


def plan_new_task(task: str, observation: Optional[Observation] = None, config: Optional[VlmEndpointConfig] = None,
                  session: Optional[requests.Session] = None) -> Tuple[str, List[PrimitiveAction], PrimitiveAction]:
    """新任务模式：一次回复里同时给出改写的指令、原语序列和当前原语。"""
    image = encode_png(observation) if observation is not None else None
    reply = query_vlm(config or VlmEndpointConfig(), build_prompt_rounds(task, 1, mode="new_task", image=image),
                      session)
    instruction = parse_new_instruction_output(reply)
    try:
        actions = parse_action_list(reply)
    except PrimitiveParseError:
        actions = []
    return instruction, actions, parse_vlm_output(reply)


def parser_factory_for(config: ExperimentConfig,
                       mode: Optional[str] = None) -> Optional[Callable[[str], WirePrimitiveParser]]:
    """
    按 parser_mode 选择原语解析器。rule 返回 None，评估时使用规则解析器；
    wire 为每个回合新建一个连到 vlm_base_url（未配置时用环境变量默认值）的解析器。
    """
    mode = mode or config.parser_mode
    if mode != "wire":
        return None
    endpoint = VlmEndpointConfig(base_url=config.vlm_base_url) if config.vlm_base_url else VlmEndpointConfig()
    logger.info(f"🚀 原语解析器使用 wire 模式：{endpoint.base_url}")
    return lambda instruction: WirePrimitiveParser(instruction, endpoint)
