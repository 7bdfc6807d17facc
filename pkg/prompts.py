# prompts.py
"""
原语解析的三轮 VLM 对话提示词：描述场景 → 列出动作 → 决定当前动作。
模板原文存放在 prompt_templates/ 下，实例化时只替换 {task}、{scene}、{actions} 三个槽位，
模板里其余的花括号（JSON 示例）原样保留。
"""
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Literal, Mapping, Optional, Tuple

from langchain_core.prompts import PromptTemplate

from data_models import PromptMessage, PromptRound
from errors import PromptContextError

TEMPLATE_DIR = Path(__file__).with_name("prompt_templates")

PromptMode = Literal["primitive", "new_instruction", "new_task"]

TEMPLATE_FILES: Dict[Tuple[str, int], str] = {
    ("primitive", 1): "stage1_describe_scene.txt",
    ("primitive", 2): "stage2_list_actions.txt",
    ("primitive", 3): "stage3_decide_action.txt",
    # 新指令 / 新任务模式只替换第一轮
    ("new_instruction", 1): "new_instruction.txt",
    ("new_task", 1): "new_task.txt",
}

SLOTS = ("task", "scene", "actions")

# 每一轮需要的上下文槽位
REQUIRED_CONTEXT = {1: (), 2: ("scene",), 3: ("scene", "actions")}


def template_path(mode: PromptMode, stage: int) -> Path:
    try:
        return TEMPLATE_DIR / TEMPLATE_FILES[(mode, stage)]
    except KeyError:
        raise PromptContextError(f"提示词模式 {mode} 没有第 {stage} 轮模板") from None


@lru_cache(maxsize=None)
def load_template(mode: PromptMode, stage: int) -> str:
    """模板原始文本（按字节读取后 UTF-8 解码，不做换行转换）。"""
    return template_path(mode, stage).read_bytes().decode("utf-8")


def _escape_braces(raw: str) -> str:
    escaped = raw.replace("{", "{{").replace("}", "}}")
    for slot in SLOTS:
        escaped = escaped.replace("{{" + slot + "}}", "{" + slot + "}")
    return escaped


@lru_cache(maxsize=None)
def prompt_template(mode: PromptMode, stage: int) -> PromptTemplate:
    return PromptTemplate.from_template(_escape_braces(load_template(mode, stage)))


def template_slots(mode: PromptMode, stage: int) -> List[str]:
    return [slot for slot in SLOTS if "{" + slot + "}" in load_template(mode, stage)]


def render_prompt(mode: PromptMode, stage: int, **values: str) -> str:
    template = prompt_template(mode, stage)
    missing = [name for name in template.input_variables if not values.get(name)]
    if missing:
        raise PromptContextError(f"第 {stage} 轮提示词缺少上下文: {', '.join(missing)}")
    return template.format(**{name: values[name] for name in template.input_variables})


def _history(stage: int, values: Mapping[str, str]) -> List[PromptMessage]:
    """前几轮的用户提示与模型回复，回复取自上下文。"""
    messages: List[PromptMessage] = []
    replies = {1: values.get("scene", ""), 2: values.get("actions", "")}
    for previous in range(1, stage):
        messages.append(PromptMessage(role="user", content=render_prompt("primitive", previous, **values)))
        messages.append(PromptMessage(role="assistant", content=replies[previous]))
    return messages


def build_prompt_rounds(instruction: str, stage: int, context: Optional[Mapping[str, str]] = None,
                        mode: PromptMode = "primitive", image: Optional[bytes] = None) -> PromptRound:
    """
    生成第 stage 轮的对话请求。第 2 轮需要第 1 轮的场景描述（context["scene"]），
    第 3 轮还需要第 2 轮的动作列表（context["actions"]）。
    """
    if not instruction.strip():
        raise PromptContextError("任务指令为空")
    if stage not in REQUIRED_CONTEXT:
        raise PromptContextError(f"没有第 {stage} 轮对话")
    context = dict(context or {})
    missing = [name for name in REQUIRED_CONTEXT[stage] if not context.get(name)]
    if missing:
        raise PromptContextError(f"第 {stage} 轮缺少前几轮的输出: {', '.join(missing)}")
    template_path(mode, stage)

    values = {**{k: v for k, v in context.items() if k in SLOTS}, "task": instruction}
    messages = _history(stage, values) if mode == "primitive" else []
    prompt = render_prompt(mode, stage, **values)
    messages.append(PromptMessage(role="user", content=prompt))
    return PromptRound(stage=stage, mode=mode, messages=tuple(messages), image=image)
