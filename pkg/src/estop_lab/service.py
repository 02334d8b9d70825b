"""Live supervised training sessions over HTTP.

A session hosts one Q-learning loop. Watchers subscribe to a step-event
stream; while at least one watcher is attached the loop paces itself to
`speed` steps per second so a human can follow, and the red-button endpoint
is armed. A trigger marks the most recent window of visited states as
removed (the initial-state support is protected), ends the episode before
the next transition, and every later transition into a removed state
terminates its episode with zero reward; the removed set is the implicit
support-set complement and can be exported for offline runs.

Sessions are deterministic given (config, intervention log): `replay_session`
re-runs the loop headlessly, applying each intervention at the recorded step
count, and reproduces the live curve exactly.
"""
from __future__ import annotations

import itertools
import json
import queue
import threading
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .envs import NAMED_MAPS, FrozenLakeSpec, build_frozenlake
from .fileio import _format_float, mdp_from_dict, support_to_dict
from .learners import LearnerConfig, QLearningLoop
from .mdp import DiscountedEpisodic, TabularMdp, TabularPolicy, policy_value
from .support import StateSet, rho0_support


@dataclass(frozen=True)
class SessionConfig:
    map: str = "classic4x4"
    hole_escape_prob: float = 0.01
    horizon: int = 100
    mdp_doc: dict | None = None  # overrides the map when provided
    seed: int = 0
    episodes: int = 200
    alpha: float = 0.1
    gamma: float = 0.99
    epsilon: float = 0.1
    epsilon_final: float = 0.01
    eval_every_episodes: int = 10
    speed: float = 5.0

    def build_mdp(self) -> TabularMdp:
        if self.mdp_doc is not None:
            return mdp_from_dict(self.mdp_doc)
        if self.map not in NAMED_MAPS:
            raise ValueError(f"unknown map {self.map!r}")
        spec = FrozenLakeSpec(
            grid=NAMED_MAPS[self.map], hole_escape_prob=self.hole_escape_prob, horizon=self.horizon
        )
        return build_frozenlake(spec)

    def learner_config(self) -> LearnerConfig:
        return LearnerConfig(
            algorithm="q_learning",
            alpha=self.alpha,
            gamma=self.gamma,
            epsilon=self.epsilon,
            epsilon_final=self.epsilon_final,
            episodes=self.episodes,
            eval_every_episodes=self.eval_every_episodes,
            seed=self.seed,
        )


@dataclass
class InterventionRecord:
    wall_time: float
    window: int
    received_at_step: int
    episode: int = -1
    timestep: int = -1
    state_at_trigger: int = -1
    marked_states: list[int] = field(default_factory=list)
    applied_at_step: int = -1

    def to_doc(self) -> dict:
        return asdict(self)


class SessionCore:
    """The deterministic part of a session: stepping, marking, and the curve.

    Interventions are requested with `request_estop` and take effect at the
    next step boundary, before any further environment transition.
    """

    def __init__(self, config: SessionConfig):
        self.config = config
        self.mdp = config.build_mdp()
        self.protected = rho0_support(self.mdp)
        self.removed: set[int] = set()
        self.loop = QLearningLoop(self.mdp, config.learner_config(), blocked=self.removed)
        self.interventions: list[InterventionRecord] = []
        self._pending: list[InterventionRecord] = []
        self.curve_x: list[int] = []
        self.curve_y: list[float] = []
        self.event_log: list[dict] = []
        self._eval_mode = DiscountedEpisodic(config.gamma)
        self._record_eval()

    # -- bookkeeping --------------------------------------------------------

    def _record_eval(self) -> None:
        policy = TabularPolicy.deterministic(self.loop.greedy_actions(), self.mdp.n_actions)
        self.curve_x.append(self.loop.steps_seen)
        self.curve_y.append(policy_value(self.mdp, policy, self._eval_mode))

    def request_estop(self, window: int) -> InterventionRecord:
        if window < 1:
            raise ValueError("window must be at least 1")
        record = InterventionRecord(
            wall_time=time.time(), window=window, received_at_step=self.loop.steps_seen
        )
        self._pending.append(record)
        return record

    def _apply_pending(self) -> None:
        for record in self._pending:
            marked = []
            recent = self.loop.episode_states[-record.window :] if self.loop.state is not None else []
            for s in recent:
                if s in self.protected or s in self.removed or s in marked:
                    continue
                marked.append(s)
            self.removed.update(marked)
            record.marked_states = sorted(marked)
            record.applied_at_step = self.loop.steps_seen
            record.episode = self.loop.episode
            record.timestep = self.loop.t
            record.state_at_trigger = self.loop.state if self.loop.state is not None else -1
            self.interventions.append(record)
            self.loop.abort_episode()
        self._pending.clear()

    def advance(self) -> dict | None:
        """Apply pending interventions, then take one transition. Returns the
        step event document, or None when the episode budget is exhausted."""
        self._apply_pending()
        if self.loop.episode >= self.config.episodes:
            return None
        event = self.loop.step()
        doc = {
            "episode": event.episode,
            "t": event.t,
            "s": event.state,
            "a": event.action,
            "r": event.reward,
            "s2": event.next_state,
            "removed_flag": event.removed_flag,
            "done": event.episode_end,
            "cause": event.cause,
        }
        if event.episode_end:
            finished = event.episode + 1
            if finished % self.config.eval_every_episodes == 0 or finished == self.config.episodes:
                self._record_eval()
        self.event_log.append(doc)
        return doc

    @property
    def finished(self) -> bool:
        return self.loop.episode >= self.config.episodes

    def support_doc(self) -> dict:
        kept = set(range(self.mdp.n_states)) - self.removed
        return support_to_dict(StateSet(kept))

    def curve_csv(self) -> str:
        lines = ["states_seen,eval_return,seed"]
        for x, y in zip(self.curve_x, self.curve_y):
            lines.append(f"{_format_float(x)},{_format_float(y)},{self.config.seed}")
        return "\n".join(lines) + "\n"


def replay_session(config: SessionConfig, interventions: list[dict]) -> SessionCore:
    """Drive a session headlessly, applying each intervention once the step
    counter reaches its recorded position; deterministic and pacing-free."""
    core = SessionCore(config)
    schedule = sorted(interventions, key=lambda item: item["applied_at_step"])
    idx = 0
    while True:
        while idx < len(schedule) and core.loop.steps_seen >= schedule[idx]["applied_at_step"]:
            core.request_estop(schedule[idx]["window"])
            idx += 1
        if core.advance() is None:
            break
    return core


class LiveSession:
    """A SessionCore driven by a background thread with human pacing."""

    def __init__(self, session_id: str, config: SessionConfig):
        self.id = session_id
        self.core = SessionCore(config)
        self.speed = config.speed
        self.paused = False
        self.stopped = False
        self._lock = threading.RLock()
        self._wake = threading.Condition(self._lock)
        self._subscribers: list[queue.SimpleQueue] = []
        self._ack: dict[int, threading.Event] = {}
        self._thread = threading.Thread(target=self._run, name=f"session-{session_id}", daemon=True)
        self._thread.start()

    # -- the stepping thread --------------------------------------------------

    def _run(self) -> None:
        while True:
            with self._wake:
                while self.paused and not self.stopped:
                    self._wake.wait()
                if self.stopped:
                    break
                event = self.core.advance()
                for record in self.core.interventions:
                    ack = self._ack.pop(id(record), None)
                    if ack is not None:
                        ack.set()
                if event is None:
                    self.stopped = True
                    break
                subscribers = list(self._subscribers)
                pacing = bool(subscribers) and self.speed > 0
                delay = 1.0 / self.speed if pacing else 0.0
            for sub in subscribers:
                sub.put(event)
            if delay:
                time.sleep(delay)
        with self._lock:
            for sub in self._subscribers:
                sub.put(None)

    # -- control ---------------------------------------------------------------

    def trigger(self, window: int) -> InterventionRecord:
        with self._lock:
            if self.stopped:
                raise SessionStateError("session has ended")
            if self.paused:
                raise SessionStateError("session is paused")
            if not self._subscribers:
                raise SessionStateError("interventions are disabled while no watcher is attached")
            record = self.core.request_estop(window)
            ack = threading.Event()
            self._ack[id(record)] = ack
        if not ack.wait(timeout=5.0):
            raise SessionStateError("intervention was not applied in time")
        return record

    def pause(self) -> None:
        with self._wake:
            self.paused = True

    def resume(self) -> None:
        with self._wake:
            self.paused = False
            self._wake.notify_all()

    def set_speed(self, steps_per_second: float) -> None:
        if steps_per_second <= 0:
            raise ValueError("speed must be positive")
        with self._lock:
            self.speed = steps_per_second

    def stop(self) -> None:
        with self._wake:
            self.stopped = True
            self._wake.notify_all()
        self._thread.join(timeout=5.0)

    def subscribe(self) -> queue.SimpleQueue:
        sub: queue.SimpleQueue = queue.SimpleQueue()
        with self._lock:
            self._subscribers.append(sub)
        return sub

    def unsubscribe(self, sub: queue.SimpleQueue) -> None:
        with self._lock:
            if sub in self._subscribers:
                self._subscribers.remove(sub)

    def state_doc(self) -> dict:
        with self._lock:
            core = self.core
            return {
                "id": self.id,
                "n_states": core.mdp.n_states,
                "n_actions": core.mdp.n_actions,
                "map": core.config.map if core.config.mdp_doc is None else "custom",
                "episode": core.loop.episode,
                "timestep": core.loop.t,
                "state": core.loop.state,
                "steps_seen": core.loop.steps_seen,
                "removed": sorted(core.removed),
                "protected": sorted(core.protected),
                "speed": self.speed,
                "paused": self.paused,
                "finished": self.stopped or core.finished,
                "n_interventions": len(core.interventions),
                "n_watchers": len(self._subscribers),
            }


class SessionStateError(RuntimeError):
    pass


def create_app(max_stream_events: int | None = None):
    """FastAPI application hosting the session endpoints (see module docs)."""
    from fastapi import Body, FastAPI, HTTPException
    from fastapi.responses import PlainTextResponse, StreamingResponse

    app = FastAPI(title="estop-lab supervisor service")
    sessions: dict[str, LiveSession] = {}
    counter = itertools.count()

    def get_session(session_id: str) -> LiveSession:
        session = sessions.get(session_id)
        if session is None:
            raise HTTPException(status_code=404, detail=f"no session {session_id!r}")
        return session

    @app.post("/sessions")
    def create_session(doc: dict = Body(default={})):
        try:
            config = SessionConfig(**doc)
            session_id = f"s{next(counter)}"
            sessions[session_id] = LiveSession(session_id, config)
        except (TypeError, ValueError) as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from None
        return {"id": session_id}

    @app.get("/sessions/{session_id}")
    def session_state(session_id: str):
        return get_session(session_id).state_doc()

    @app.post("/sessions/{session_id}/estop")
    def estop(session_id: str, doc: dict = Body(default={})):
        window = int(doc.get("window", 1))
        try:
            record = get_session(session_id).trigger(window)
        except SessionStateError as exc:
            raise HTTPException(status_code=409, detail=str(exc)) from None
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from None
        return record.to_doc()

    @app.post("/sessions/{session_id}/pause")
    def pause(session_id: str):
        get_session(session_id).pause()
        return {"paused": True}

    @app.post("/sessions/{session_id}/resume")
    def resume(session_id: str):
        get_session(session_id).resume()
        return {"paused": False}

    @app.post("/sessions/{session_id}/speed")
    def speed(session_id: str, doc: dict = Body(...)):
        try:
            get_session(session_id).set_speed(float(doc["speed"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise HTTPException(status_code=422, detail=f"need a positive numeric 'speed': {exc}") from None
        return {"speed": get_session(session_id).speed}

    @app.post("/sessions/{session_id}/stop")
    def stop(session_id: str):
        get_session(session_id).stop()
        return {"finished": True}

    @app.get("/sessions/{session_id}/support")
    def support(session_id: str):
        return get_session(session_id).core.support_doc()

    @app.get("/sessions/{session_id}/curve", response_class=PlainTextResponse)
    def curve(session_id: str):
        return get_session(session_id).core.curve_csv()

    @app.get("/sessions/{session_id}/interventions")
    def interventions(session_id: str):
        return [record.to_doc() for record in get_session(session_id).core.interventions]

    @app.get("/sessions/{session_id}/events")
    def events(session_id: str, replay: int = 0):
        session = get_session(session_id)
        sub = session.subscribe()

        def stream():
            sent = 0
            try:
                if replay:
                    with session._lock:
                        backlog = list(session.core.event_log)
                    for doc in backlog:
                        yield f"data: {json.dumps(doc)}\n\n"
                        sent += 1
                emitted = 0
                while True:
                    try:
                        doc = sub.get(timeout=30.0)
                    except queue.Empty:
                        yield ": keep-alive\n\n"
                        continue
                    if doc is None:
                        break
                    yield f"data: {json.dumps(doc)}\n\n"
                    emitted += 1
                    if max_stream_events is not None and emitted >= max_stream_events:
                        break
            finally:
                session.unsubscribe(sub)

        return StreamingResponse(stream(), media_type="text/event-stream")

    return app
