# ahe.py
"""
异步分层执行器：原语解析、场景预测、动作预测三个阶段各按自己的频率运行，
阶段之间只通过“最新值”邮箱通信。某阶段在下一个节拍到来时仍在计算，就跳过这个节拍，
下游继续读它上一次的输出。

三种模式：
  virtual     离散事件虚拟时钟，时间为精确有理数，完全确定；
  real        每个阶段一个线程，按墙钟节拍运行；
  synchronous 每一步依次执行全部阶段（基线，见 graph.py 中的同步步进图）。
"""
import heapq
import itertools
import json
import logging
import threading
import time as wallclock
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Dict, List, Literal, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from config import DEFAULT_RATES, TRACE_HEADER
from errors import ConfigError, PivotError

logger = logging.getLogger(__name__)

CAMERA = "camera"
STAGE_NAMES = ("parser", "scene", "action")

Number = Union[int, float, str, Fraction]


def as_fraction(value: Number) -> Fraction:
    if isinstance(value, Fraction):
        return value
    if isinstance(value, float):
        return Fraction(repr(value))
    return Fraction(value)


class EnvironmentHook(Protocol):
    def observe(self) -> Any: ...

    def apply(self, action: Any) -> Any: ...

    @property
    def done(self) -> bool: ...


class CountingEnvironment:
    """只数动作次数的环境，用于调度基准。"""

    def __init__(self):
        self.steps = 0

    def observe(self) -> int:
        return self.steps

    def apply(self, action: Any) -> None:
        self.steps += 1

    @property
    def done(self) -> bool:
        return False


class StageSpec(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    name: str
    rate: Fraction
    compute: Callable[[Dict[str, Any]], Any]
    cost_ms: Fraction = Fraction(0)
    inputs: Tuple[str, ...] = (CAMERA,)

    @field_validator("rate", "cost_ms", mode="before")
    @classmethod
    def _exact(cls, value: Number) -> Fraction:
        return as_fraction(value)

    @model_validator(mode="after")
    def _check(self) -> "StageSpec":
        if self.rate <= 0:
            raise ValueError(f"阶段 {self.name} 的频率必须为正")
        if self.cost_ms < 0:
            raise ValueError(f"阶段 {self.name} 的模拟耗时不能为负")
        return self

    @property
    def period(self) -> Fraction:
        return 1 / self.rate

    @property
    def cost(self) -> Fraction:
        return self.cost_ms / 1000


class ExecutorConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    rates: Tuple[float, float, float] = DEFAULT_RATES
    mode: Literal["real", "virtual", "synchronous"] = "virtual"
    duration_s: float = Field(10.0, gt=0.0)
    stop_when_done: bool = True

    @model_validator(mode="after")
    def _ordered(self) -> "ExecutorConfig":
        v1, v2, v3 = self.rates
        if not (0 < v1 < v2 < v3):
            raise ValueError(f"执行频率必须满足 0 < v1 < v2 < v3，当前为 {self.rates}")
        return self


class Snapshot(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    value: Any = None
    version: int = 0
    publish_time: Fraction = Fraction(0)
    lineage: Dict[str, Tuple[int, Fraction]] = {}
    origin: Fraction = Fraction(0)


class Mailbox:
    """单生产者、多消费者、容量为 1 的最新值邮箱。发布整体替换快照，读取不会阻塞太久也不会读到半截值。"""

    def __init__(self, producer: str):
        self.producer = producer
        self._lock = threading.Lock()
        self._snapshot = Snapshot()

    def publish(self, value: Any, publish_time: Fraction, lineage: Optional[Dict[str, Tuple[int, Fraction]]] = None,
                origin: Optional[Fraction] = None) -> int:
        with self._lock:
            version = self._snapshot.version + 1
            self._snapshot = Snapshot(value=value, version=version, publish_time=publish_time,
                                      lineage=dict(lineage or {}),
                                      origin=publish_time if origin is None else origin)
            return version

    def read(self) -> Snapshot:
        with self._lock:
            return self._snapshot

    @property
    def version(self) -> int:
        return self.read().version


class TickRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    stage: str
    tick: int
    time: float
    status: Literal["executed", "busy", "starved", "error"]
    consumed: Dict[str, int] = {}
    staleness: Dict[str, float] = {}
    output_version: Optional[int] = None
    publish_time: Optional[float] = None
    latency_ms: float = 0.0
    e2e_ms: Optional[float] = None
    error: Optional[str] = None


class ExecutionTrace(BaseModel):
    mode: str
    duration_s: float
    rates: Dict[str, float]
    costs_ms: Dict[str, float]
    records: List[TickRecord] = []
    env_steps: int = 0

    def stage_records(self, stage: str, status: Optional[str] = None) -> List[TickRecord]:
        return [r for r in self.records if r.stage == stage and (status is None or r.status == status)]


class _Pending(BaseModel):
    """已开始计算、将在 publish_time 发布的输出。"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    stage: str
    tick: int
    tick_time: Fraction
    output: Any
    lineage: Dict[str, Tuple[int, Fraction]]
    origin: Fraction
    consumed: Dict[str, int]
    staleness: Dict[str, float]


def _check_chain(stages: Sequence[StageSpec]) -> None:
    if not stages:
        raise ConfigError("至少需要一个阶段")
    names = [s.name for s in stages]
    if len(set(names)) != len(names) or CAMERA in names:
        raise ConfigError(f"阶段名必须唯一且不能为 {CAMERA!r}: {names}")
    for i, stage in enumerate(stages):
        allowed = {CAMERA, *names[:i]}
        unknown = [name for name in stage.inputs if name not in allowed]
        if unknown:
            raise ConfigError(f"阶段 {stage.name} 的输入 {unknown} 不在上游")
        if i and not stage.rate > stages[i - 1].rate:
            raise ConfigError(f"频率必须沿链路严格递增: {stages[i - 1].name}={stages[i - 1].rate} "
                              f"≥ {stage.name}={stage.rate}")


def consume_inputs(stage: StageSpec, tick: int, tick_time: Fraction, mailboxes: Dict[str, Mailbox],
                   rates: Dict[str, Fraction]) -> Tuple[Optional[_Pending], Optional[TickRecord]]:
    """读取上游最新值并执行计算。返回待发布输出，或者一条跳过/出错记录。"""
    snapshots = {name: mailboxes[name].read() for name in stage.inputs}
    consumed = {name: snap.version for name, snap in snapshots.items()}
    if any(v == 0 for v in consumed.values()):
        return None, TickRecord(stage=stage.name, tick=tick, time=float(tick_time), status="starved",
                                consumed=consumed)

    lineage: Dict[str, Tuple[int, Fraction]] = {}
    for name, snap in snapshots.items():
        lineage.update(snap.lineage)
    for name, snap in snapshots.items():
        lineage[name] = (snap.version, snap.publish_time)
    origin = min(snap.origin for snap in snapshots.values())
    staleness = {
        producer: float((tick_time - published) * rates[producer])
        for producer, (_, published) in lineage.items() if producer != CAMERA
    }

    try:
        output = stage.compute({name: snap.value for name, snap in snapshots.items()})
    except Exception as e:
        logger.warning(f"⚠️ 阶段 {stage.name} 在 t={float(tick_time):.4f}s 计算失败，保留上一次输出: {e}")
        return None, TickRecord(stage=stage.name, tick=tick, time=float(tick_time), status="error",
                                consumed=consumed, staleness=staleness, error=str(e))
    return _Pending(stage=stage.name, tick=tick, tick_time=tick_time, output=output, lineage=lineage,
                    origin=origin, consumed=consumed, staleness=staleness), None


def executed_record(pending: _Pending, version: int, publish_time: Fraction, latency: Fraction,
                    is_last: bool) -> TickRecord:
    return TickRecord(
        stage=pending.stage, tick=pending.tick, time=float(pending.tick_time), status="executed",
        consumed=pending.consumed, staleness=pending.staleness, output_version=version,
        publish_time=float(publish_time), latency_ms=float(latency * 1000),
        e2e_ms=float((publish_time - pending.origin) * 1000) if is_last else None,
    )


def new_trace(mode: str, duration: float, stages: Sequence[StageSpec]) -> ExecutionTrace:
    return ExecutionTrace(mode=mode, duration_s=duration,
                          rates={s.name: float(s.rate) for s in stages},
                          costs_ms={s.name: float(s.cost_ms) for s in stages})


def _run_virtual(config: ExecutorConfig, stages: Sequence[StageSpec],
                 env: Optional[EnvironmentHook]) -> ExecutionTrace:
    order = {s.name: i for i, s in enumerate(stages)}
    rates = {s.name: s.rate for s in stages}
    last = stages[-1].name
    mailboxes = {CAMERA: Mailbox(CAMERA), **{s.name: Mailbox(s.name) for s in stages}}
    duration = as_fraction(config.duration_s)
    busy_until = {s.name: Fraction(0) for s in stages}
    records: List[TickRecord] = []
    env_steps = 0

    # 事件：(时间, 类别 0=发布/1=节拍, 阶段顺序, 序号, 负载)；同一时刻先发布再节拍，节拍按慢阶段优先
    heap: List[tuple] = []
    seq = itertools.count()
    mailboxes[CAMERA].publish(env.observe() if env is not None else None, Fraction(0))
    for stage in stages:
        heapq.heappush(heap, (Fraction(0), 1, order[stage.name], next(seq), (stage, 0)))

    while heap:
        now, kind, _, _, payload = heapq.heappop(heap)
        if kind == 0:
            pending, stage = payload
            version = mailboxes[stage.name].publish(pending.output, now, pending.lineage, pending.origin)
            records.append(executed_record(pending, version, now, stage.cost, stage.name == last))
            if stage.name == last and env is not None:
                env.apply(pending.output)
                env_steps += 1
                mailboxes[CAMERA].publish(env.observe(), now)
                if config.stop_when_done and env.done:
                    break
            continue

        stage, k = payload
        following = Fraction(k + 1) / stage.rate
        if following < duration:
            heapq.heappush(heap, (following, 1, order[stage.name], next(seq), (stage, k + 1)))
        if busy_until[stage.name] > now:
            records.append(TickRecord(stage=stage.name, tick=k, time=float(now), status="busy"))
            continue
        pending, skipped = consume_inputs(stage, k, now, mailboxes, rates)
        if skipped is not None:
            records.append(skipped)
            continue
        busy_until[stage.name] = now + stage.cost
        heapq.heappush(heap, (now + stage.cost, 0, order[stage.name], next(seq), (pending, stage)))

    trace = new_trace("virtual", config.duration_s, stages)
    trace.records = records
    trace.env_steps = env_steps
    return trace


def _run_real(config: ExecutorConfig, stages: Sequence[StageSpec], env: Optional[EnvironmentHook]) -> ExecutionTrace:
    rates = {s.name: s.rate for s in stages}
    last = stages[-1].name
    mailboxes = {CAMERA: Mailbox(CAMERA), **{s.name: Mailbox(s.name) for s in stages}}
    records: List[TickRecord] = []
    records_lock = threading.Lock()
    env_lock = threading.Lock()
    stop = threading.Event()
    counters = {"env_steps": 0}
    start = wallclock.monotonic()

    def elapsed() -> Fraction:
        return as_fraction(wallclock.monotonic() - start)

    def append(record: TickRecord) -> None:
        with records_lock:
            records.append(record)

    with env_lock:
        mailboxes[CAMERA].publish(env.observe() if env is not None else None, Fraction(0))

    def loop(stage: StageSpec) -> None:
        period = float(stage.period)
        k = 0
        while not stop.is_set():
            tick_time = k * period
            if tick_time >= config.duration_s:
                break
            wait = tick_time - float(elapsed())
            if wait > 0 and stop.wait(wait):
                break
            began = elapsed()
            pending, skipped = consume_inputs(stage, k, as_fraction(tick_time), mailboxes, rates)
            if skipped is not None:
                append(skipped)
            else:
                remaining = float(stage.cost) - float(elapsed() - began)
                if remaining > 0:
                    wallclock.sleep(remaining)
                published = elapsed()
                version = mailboxes[stage.name].publish(pending.output, published, pending.lineage, pending.origin)
                append(executed_record(pending, version, published, published - began, stage.name == last))
                if stage.name == last and env is not None:
                    with env_lock:
                        env.apply(pending.output)
                        counters["env_steps"] += 1
                        mailboxes[CAMERA].publish(env.observe(), elapsed())
                        if config.stop_when_done and env.done:
                            stop.set()
            # 计算期间错过的节拍记为 busy
            finished = float(elapsed())
            k += 1
            while k * period < min(finished, config.duration_s) and not stop.is_set():
                append(TickRecord(stage=stage.name, tick=k, time=k * period, status="busy"))
                k += 1

    threads = [threading.Thread(target=loop, args=(stage,), name=f"ahe-{stage.name}", daemon=True)
               for stage in stages]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join(timeout=config.duration_s + 30.0)
    stop.set()

    trace = new_trace("real", config.duration_s, stages)
    trace.records = sorted(records, key=lambda r: (r.time, r.stage, r.tick))
    trace.env_steps = counters["env_steps"]
    return trace


def run_pipeline(config: ExecutorConfig, stages: Sequence[StageSpec],
                 env: Optional[EnvironmentHook] = None) -> ExecutionTrace:
    """
    按配置的模式运行阶段链。链上最后一个阶段的输出驱动环境，
    每次应用动作后环境的新观测发布到 camera 邮箱。
    """
    _check_chain(stages)
    if config.mode == "synchronous":
        steps = int(config.duration_s * float(stages[-1].rate))
        return run_synchronous(stages, steps, env, config.stop_when_done)
    logger.info(f"🚀 AHE {config.mode} 模式启动：" + ", ".join(f"{s.name}@{float(s.rate):g}Hz" for s in stages))
    trace = _run_virtual(config, stages, env) if config.mode == "virtual" else _run_real(config, stages, env)
    logger.info(f"✅ AHE 结束：{len(trace.records)} 条节拍记录，环境执行 {trace.env_steps} 步")
    return trace


def run_synchronous(stages: Sequence[StageSpec], steps: int, env: Optional[EnvironmentHook] = None,
                    stop_when_done: bool = True) -> ExecutionTrace:
    """串行基线：每一步依次执行全部阶段，单步耗时等于各阶段耗时之和。"""
    from graph import build_sync_step_graph

    _check_chain(stages)
    mailboxes = {CAMERA: Mailbox(CAMERA), **{s.name: Mailbox(s.name) for s in stages}}
    mailboxes[CAMERA].publish(env.observe() if env is not None else None, Fraction(0))
    app = build_sync_step_graph(stages, mailboxes, env, stop_when_done).compile()
    final = app.invoke(
        {"step": 0, "steps": steps, "time": Fraction(0), "records": [], "env_steps": 0, "error_message": None},
        {"recursion_limit": max(25, steps * (len(stages) + 2) + 10)},
    )
    period = sum((s.cost for s in stages), Fraction(0))
    trace = new_trace("synchronous", float(period * steps), stages)
    trace.records = final["records"]
    trace.env_steps = final["env_steps"]
    return trace


# --- 指标 ---

class StageMetrics(BaseModel):
    ticks: int
    executed: int
    skipped_busy: int
    skipped_starved: int
    errors: int
    achieved_rate: float
    latency_mean_ms: float
    latency_p50_ms: float
    latency_p95_ms: float
    staleness_mean: Dict[str, float] = {}
    staleness_max: Dict[str, float] = {}


class TraceMetrics(BaseModel):
    mode: str
    stages: Dict[str, StageMetrics]
    action_period_ms: Optional[float] = None
    step_rate: float
    e2e_latency_mean_ms: Optional[float] = None
    max_staleness: float = 0.0

    @property
    def step_time_ms(self) -> float:
        return 1000.0 / self.step_rate if self.step_rate > 0 else float("inf")


def _percentile(values: List[float], q: float) -> float:
    return float(np.percentile(values, q)) if values else 0.0


def trace_metrics(trace: ExecutionTrace) -> TraceMetrics:
    """节拍计数、延迟分位数、陈旧度（以生产者周期计）、实际频率、端到端延迟和步频。"""
    if not trace.records:
        raise PivotError("执行轨迹为空，无法统计")
    stages: Dict[str, StageMetrics] = {}
    for name in trace.rates:
        recs = trace.stage_records(name)
        executed = [r for r in recs if r.status == "executed"]
        latencies = [r.latency_ms for r in executed]
        staleness: Dict[str, List[float]] = {}
        for r in executed:
            for producer, age in r.staleness.items():
                staleness.setdefault(producer, []).append(age)
        stages[name] = StageMetrics(
            ticks=len(recs),
            executed=len(executed),
            skipped_busy=sum(r.status == "busy" for r in recs),
            skipped_starved=sum(r.status == "starved" for r in recs),
            errors=sum(r.status == "error" for r in recs),
            achieved_rate=len(executed) / trace.duration_s if trace.duration_s > 0 else 0.0,
            latency_mean_ms=float(np.mean(latencies)) if latencies else 0.0,
            latency_p50_ms=_percentile(latencies, 50),
            latency_p95_ms=_percentile(latencies, 95),
            staleness_mean={p: float(np.mean(v)) for p, v in staleness.items()},
            staleness_max={p: float(np.max(v)) for p, v in staleness.items()},
        )

    last = list(trace.rates)[-1]
    published = sorted(r.publish_time for r in trace.stage_records(last, "executed"))
    period = float(np.mean(np.diff(published))) * 1000 if len(published) > 1 else None
    if trace.mode == "synchronous":
        step_time = sum(trace.costs_ms.values()) / 1000
        step_rate = 1.0 / step_time if step_time > 0 else float("inf")
    else:
        step_rate = len(published) / trace.duration_s
    e2e = [r.e2e_ms for r in trace.stage_records(last, "executed") if r.e2e_ms is not None]
    max_staleness = max((v for m in stages.values() for v in m.staleness_max.values()), default=0.0)
    return TraceMetrics(mode=trace.mode, stages=stages, action_period_ms=period, step_rate=step_rate,
                        e2e_latency_mean_ms=float(np.mean(e2e)) if e2e else None, max_staleness=max_staleness)


# --- 基准与序列化 ---

def chain_stages(rates: Sequence[Number], costs_ms: Sequence[Number],
                 computes: Optional[Sequence[Callable[[Dict[str, Any]], Any]]] = None) -> List[StageSpec]:
    """按 camera → parser → scene → action 的标准链路组装三个阶段。"""
    if computes is None:
        computes = [lambda inputs: 0] * 3
    inputs = [(CAMERA,), ("parser", CAMERA), ("scene", CAMERA)]
    return [StageSpec(name=name, rate=rate, cost_ms=cost, compute=compute, inputs=ins)
            for name, rate, cost, compute, ins in zip(STAGE_NAMES, rates, costs_ms, computes, inputs)]


def saturated_rates(costs_ms: Sequence[Number]) -> List[Fraction]:
    """每个阶段恰好在上一次计算结束时开始下一次：频率 = 1 / 耗时。"""
    return [Fraction(1000) / as_fraction(c) for c in costs_ms]


class SpeedupReport(BaseModel):
    async_step_rate: float
    sync_step_rate: float
    ratio: float
    expected_ratio: float


def benchmark_speedup(costs_ms: Sequence[Number], rates: Optional[Sequence[Number]] = None,
                      duration_s: float = 10.0) -> SpeedupReport:
    """虚拟时钟下异步与同步的步频之比；期望值为 各阶段耗时之和 / 动作阶段周期。"""
    rates = list(rates) if rates is not None else saturated_rates(costs_ms)
    async_trace = _run_virtual(ExecutorConfig(duration_s=duration_s, stop_when_done=False),
                               chain_stages(rates, costs_ms), CountingEnvironment())
    sync_stages = chain_stages(rates, costs_ms)
    total = sum((s.cost for s in sync_stages), Fraction(0))
    sync_trace = run_synchronous(sync_stages, max(1, int(as_fraction(duration_s) / total)), CountingEnvironment())
    a, s = trace_metrics(async_trace).step_rate, trace_metrics(sync_trace).step_rate
    expected = float(total * as_fraction(rates[-1]))
    return SpeedupReport(async_step_rate=a, sync_step_rate=s, ratio=a / s, expected_ratio=expected)


def dump_trace(trace: ExecutionTrace) -> str:
    meta = trace.model_dump(mode="json", exclude={"records"})
    lines = [TRACE_HEADER, json.dumps(meta, ensure_ascii=False)]
    lines.extend(r.model_dump_json() for r in trace.records)
    return "\n".join(lines) + "\n"


def save_trace(trace: ExecutionTrace, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_trace(trace), encoding="utf-8")
    logger.info(f"✅ 执行轨迹已写出: {path}")


def load_trace(path: Union[str, Path]) -> ExecutionTrace:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != TRACE_HEADER:
        raise PivotError(f"不是有效的执行轨迹文件（缺少 '{TRACE_HEADER}' 头）: {path}")
    trace = ExecutionTrace.model_validate(json.loads(lines[1]))
    trace.records = [TickRecord.model_validate_json(line) for line in lines[2:] if line.strip()]
    return trace
