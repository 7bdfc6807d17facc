# test_prompts.py
import pytest

from errors import PromptContextError
from prompts import build_prompt_rounds, load_template, render_prompt, template_slots

CONTEXT = {"scene": "a red jar and a lid on the table", "actions": '{"actions": [{"action": "grasp"}]}'}


@pytest.mark.parametrize("mode, stage", [("primitive", 1), ("primitive", 2), ("primitive", 3),
                                         ("new_instruction", 1), ("new_task", 1)])
def test_rendering_only_fills_slots(mode, stage):
    raw = load_template(mode, stage)
    expected = raw.replace("{task}", "pick the milk")
    for slot, value in CONTEXT.items():
        expected = expected.replace("{" + slot + "}", value)
    values = {"task": "pick the milk", **{k: v for k, v in CONTEXT.items() if k in template_slots(mode, stage)}}
    assert render_prompt(mode, stage, **values) == expected


@pytest.mark.parametrize("stage", [2, 3])
def test_worked_example_is_kept_verbatim(stage):
    assert "Task: close the red jar." in render_prompt("primitive", stage, task="pick the milk", **CONTEXT)


def test_stage_three_carries_previous_rounds():
    round_ = build_prompt_rounds("pick the milk", 3, CONTEXT)
    assert [m.role for m in round_.messages] == ["user", "assistant", "user", "assistant", "user"]
    assert round_.messages[1].content == CONTEXT["scene"]
    assert round_.messages[3].content == CONTEXT["actions"]
    assert "only can output one" in round_.prompt


@pytest.mark.parametrize("stage, context", [(2, {}), (3, {"scene": "x"}), (4, CONTEXT)])
def test_missing_context_is_rejected(stage, context):
    with pytest.raises(PromptContextError):
        build_prompt_rounds("pick the milk", stage, context)


def test_empty_instruction_is_rejected():
    with pytest.raises(PromptContextError):
        build_prompt_rounds("  ", 1)


def test_new_modes_have_only_one_round():
    assert len(build_prompt_rounds("tidy up", 1, mode="new_task").messages) == 1
    with pytest.raises(PromptContextError):
        build_prompt_rounds("tidy up", 2, CONTEXT, mode="new_instruction")


def test_multiline_replies_fill_slots_unchanged():
    scene = "a red jar\n  and a lid\ton the table\n"
    round_ = build_prompt_rounds("pick the milk", 2, {"scene": scene})
    assert round_.messages[1].content == scene
    assert scene in round_.prompt
