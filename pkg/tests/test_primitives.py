# test_primitives.py
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from data_models import Direction, PrimitiveAction, PrimitiveKind, Skill, TaskSpec
from errors import PrimitiveParseError, UnknownSkillError
from primitives import (PrimitiveFsm, all_primitive_variants, coerce_skill, describe_primitive, map_action_phrase,
                        parse_action_list, parse_new_instruction_output, parse_primitive_rule, parse_vlm_output,
                        render_do_action)
from sim import reset

K = PrimitiveKind


def test_parse_example_output():
    parsed = parse_vlm_output('{"do_action": {"action": "move to", "target": "the red jar"}}')
    assert parsed == PrimitiveAction(kind=K.CLOSE_TO, target="the red jar")


def test_parse_tolerates_missing_colon_and_trailing_comma():
    parsed = parse_vlm_output('{ "do_action" {"action": "clamp", "target": "jar",} }')
    assert parsed.kind == K.GRASP


@settings(max_examples=200)
@given(prefix=st.text(alphabet=st.characters(blacklist_characters="{}\""), max_size=40),
       suffix=st.text(alphabet=st.characters(blacklist_characters="{}\""), max_size=40),
       primitive=st.sampled_from(all_primitive_variants("milk")))
def test_parse_ignores_surrounding_prose(prefix, suffix, primitive):
    assert parse_vlm_output(f"{prefix}{render_do_action(primitive)}{suffix}") == primitive


@pytest.mark.parametrize("primitive", all_primitive_variants("the red jar"))
def test_render_then_parse_is_identity(primitive):
    assert parse_vlm_output(render_do_action(primitive)) == primitive


@pytest.mark.parametrize("text", ["no json here", '{"do_action": {"action": "dance", "target": "x"}}',
                                  '{"do_action": {"action": "move", "target": "x"}}', "{unbalanced"])
def test_unparseable_output_keeps_raw_text(text):
    with pytest.raises(PrimitiveParseError) as info:
        parse_vlm_output(text)
    assert info.value.raw_text == text


def test_direction_only_kept_for_directional_kinds():
    assert map_action_phrase("push left").direction == Direction.LEFT
    assert map_action_phrase("move forward").kind == K.PUSH
    assert map_action_phrase("grasp left").direction is None


def test_direction_on_non_directional_kind_is_invalid():
    with pytest.raises(ValueError):
        PrimitiveAction(kind=K.GRASP, direction=Direction.LEFT)


def test_taxonomy_has_ten_kinds_and_directional_variants():
    variants = all_primitive_variants()
    assert len({v.kind for v in variants}) == 10
    assert len(variants) == 10 + 3 * 4


def test_parse_action_list_drops_unknown_entries():
    text = 'Scene done. {"actions": [{"action": "move to", "target": "milk"}, {"action": "dance"}, ' \
           '{"action": "clamp", "target": "milk"}, {"action": "lift", "target": "milk"}]}'
    assert [a.kind for a in parse_action_list(text)] == [K.CLOSE_TO, K.GRASP, K.MOVE_UP]


def test_parse_action_list_requires_list():
    with pytest.raises(PrimitiveParseError):
        parse_action_list('{"do_action": {"action": "grasp"}}')


def test_parse_new_instruction():
    assert parse_new_instruction_output('sure: {"instruction": " pick the milk "}') == "pick the milk"
    with pytest.raises(PrimitiveParseError):
        parse_new_instruction_output('{"instruction": ""}')


def test_describe_primitive_with_direction_and_target():
    assert describe_primitive(PrimitiveAction(kind=K.PUSH, direction=Direction.FRONT, target="cup")) == \
        "push the target object front: cup"


def test_unknown_skill():
    with pytest.raises(UnknownSkillError):
        coerce_skill("Juggle")


def test_door_skill_without_door_is_rejected():
    world = reset(TaskSpec(skill=Skill.PICK_TARGET), seed=1)
    with pytest.raises(UnknownSkillError):
        parse_primitive_rule(Skill.OPEN_DOOR, world)


@pytest.mark.parametrize("skill, expected", [
    (Skill.PICK_TARGET, [K.CLOSE_TO, K.GRASP, K.MOVE_UP]),
    (Skill.MOVE_A_NEAR_B, [K.CLOSE_TO, K.GRASP, K.MOVE_UP, K.CLOSE_TO, K.MOVE_DOWN, K.RELEASE]),
    (Skill.PLACE_TARGET, [K.MOVE_DOWN, K.RELEASE]),
    (Skill.OPEN_DOOR, [K.CLOSE_TO, K.GRASP, K.OPEN, K.RELEASE]),
    (Skill.PUSH_TARGET_FRONT, [K.CLOSE_TO, K.PUSH]),
    (Skill.KNOCK_TARGET_OVER, [K.CLOSE_TO, K.PUSH]),
])
def test_fsm_sequences(skill, expected):
    world = reset(TaskSpec(skill=skill), seed=3)
    assert [p.kind for p in PrimitiveFsm(skill, world).sequence()] == expected


def test_rule_parser_starts_at_first_primitive():
    world = reset(TaskSpec(skill=Skill.PICK_TARGET), seed=4)
    primitive = parse_primitive_rule(Skill.PICK_TARGET, world)
    assert primitive.kind == K.CLOSE_TO
    assert primitive.target == world.targets[0]


def test_render_do_action_is_json():
    payload = json.loads(render_do_action(PrimitiveAction(kind=K.ROTATE, direction=Direction.LEFT, target="lid")))
    assert payload == {"do_action": {"action": "rotate left", "target": "lid"}}
