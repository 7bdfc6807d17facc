# test_vlm.py
import pytest

from api_tools import VlmEndpointConfig, query_vlm
from data_models import PrimitiveAction, PrimitiveKind
from errors import PrimitiveParseError, VlmError, VlmStatusError, VlmTimeoutError, VlmTransportError
from primitives import all_primitive_variants, render_do_action
from prompts import build_prompt_rounds
from tests.helpers import make_observation
from vlm_agent import WirePrimitiveParser, plan_new_task, rewrite_instruction
from vlm_stub import StubReply, VlmStubServer, stage_of, staged_responder

ROUND = build_prompt_rounds("pick the milk", 1)


def _config(stub, **overrides):
    return VlmEndpointConfig(base_url=stub.base_url, backoff_ms=0, **overrides)


def test_every_primitive_survives_the_wire():
    variants = all_primitive_variants("the red jar")
    with VlmStubServer([render_do_action(v) for v in variants]) as stub:
        parser = WirePrimitiveParser("close the red jar", _config(stub))
        parser.scene, parser.actions_text = "a jar", '{"actions": []}'
        assert [parser.decide() for _ in variants] == variants
        assert len(stub.requests) == len(variants)


def test_server_errors_are_retried():
    with VlmStubServer([StubReply(status=500), StubReply(status=503), "fine"]) as stub:
        assert query_vlm(_config(stub, max_retries=3), ROUND) == "fine"
        assert len(stub.requests) == 3


def test_retries_are_bounded():
    with VlmStubServer([StubReply(status=500)] * 3) as stub:
        with pytest.raises(VlmStatusError) as info:
            query_vlm(_config(stub, max_retries=2), ROUND)
        assert info.value.status_code == 500
        assert len(stub.requests) == 3


def test_client_errors_are_not_retried():
    with VlmStubServer([StubReply(status=422, text="bad"), "never"]) as stub:
        with pytest.raises(VlmStatusError) as info:
            query_vlm(_config(stub), ROUND)
        assert info.value.status_code == 422
        assert len(stub.requests) == 1


def test_timeout():
    with VlmStubServer([StubReply(text="late", delay_s=0.5)]) as stub:
        with pytest.raises(VlmTimeoutError):
            query_vlm(_config(stub, timeout_ms=100, max_retries=0), ROUND)


def test_malformed_body():
    with VlmStubServer([StubReply(raw_body="not json")]) as stub:
        with pytest.raises(VlmError):
            query_vlm(_config(stub), ROUND)


def test_unreachable_server():
    stub = VlmStubServer()
    url = stub.base_url
    stub.stop()
    with pytest.raises(VlmTransportError):
        query_vlm(VlmEndpointConfig(base_url=url, backoff_ms=0, max_retries=1), ROUND)


def test_request_carries_image_and_history():
    with VlmStubServer(["a jar"]) as stub:
        round_ = build_prompt_rounds("pick the milk", 1, image=b"\x89PNG")
        query_vlm(_config(stub), round_)
        parts = stub.requests[0]["messages"][-1]["content"]
        assert [p["type"] for p in parts] == ["text", "image"]
        assert "pick the milk" in stub.prompts()[0]


def test_three_round_dialogue_and_fallback():
    grasp = PrimitiveAction(kind=PrimitiveKind.GRASP, target="jar")
    replies = iter([render_do_action(grasp), "I am not sure"])
    responder = staged_responder({
        1: lambda payload: "a red jar on the table",
        2: lambda payload: '{"actions": [{"action": "move to", "target": "jar"}, {"action": "grasp"}]}',
        3: lambda payload: next(replies),
    })
    with VlmStubServer(responder=responder) as stub:
        parser = WirePrimitiveParser("pick the jar", _config(stub))
        observation = make_observation(40)
        assert parser.decide(observation) == grasp
        assert [a.kind for a in parser.actions] == [PrimitiveKind.CLOSE_TO, PrimitiveKind.GRASP]
        assert parser.decide(observation) == grasp
        assert parser.fallbacks == 1
        assert [stage_of(p) for p in stub.requests] == [1, 2, 3, 3]


def test_first_unparseable_reply_raises():
    with VlmStubServer(["scene", '{"actions": []}', "gibberish"]) as stub:
        parser = WirePrimitiveParser("pick the jar", _config(stub))
        with pytest.raises(PrimitiveParseError):
            parser.decide()


def test_rewrite_and_plan():
    plan = ('{"instruction": "pick the cup", "actions": [{"action": "move to", "target": "cup"}], '
            '"do_action": {"action": "move to", "target": "cup"}}')
    with VlmStubServer(['{"instruction": "open the door"}', plan]) as stub:
        assert rewrite_instruction("let some air into the cabinet", _config(stub)) == "open the door"
        instruction, actions, current = plan_new_task("fetch me something to drink from", config=_config(stub))
        assert instruction == "pick the cup"
        assert [a.kind for a in actions] == [PrimitiveKind.CLOSE_TO]
        assert current.target == "cup"
