"""Chat-completion adapters for the actor and the critics.

The adapters speak the common ``/chat/completions`` wire format: a JSON body
``{model, messages, temperature, n}`` posted to ``<base_url>/chat/completions``
with a bearer key read from an environment variable. Every request and
response is appended to ``trace`` so an episode can be replayed.

Critic completions must end with a ``SCORE: <number>`` line; the number is
clamped to [0, 100] and a missing or unparsable score falls back to 50 with a
warning. Actor completions name their choice with a ``TEMPLATE: <name>`` line.
"""

from __future__ import annotations

import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field

import httpx
import numpy as np

from .agent import CriticVerdict, PromptContext, TemplateLibrary, clamp_score
from .dynamics import ExecFeedback, Intervention, Observation
from .errors import AdapterUnavailable, IndexOutOfBuffer, UnknownTemplate
from .network import SupplyNetwork

log = logging.getLogger(__name__)

PROMPT_VERSION = "v1"
FALLBACK_SCORE = 50.0
_SCORE_RE = re.compile(r"SCORE:\s*(-?\d+(?:\.\d+)?)", re.IGNORECASE)
_TEMPLATE_RE = re.compile(r"TEMPLATE:\s*([A-Za-z_]+)", re.IGNORECASE)

ACTOR_SYSTEM = (
    "You choose one intervention template for the supply network. Explain briefly, "
    "then finish with a line 'TEMPLATE: <name>'. Available templates:\n{templates}"
)
INTERNAL_SYSTEM = (
    "Before execution, judge whether the proposed intervention complies with the active "
    "export controls and sanctions. Finish with a line 'SCORE: <0-100>'."
)
EXTERNAL_SYSTEM = (
    "Assess the realized outcome of the executed intervention. Finish with a line 'SCORE: <0-100>'."
)
RETRO_SYSTEM = (
    "With the benefit of hindsight over the following steps, rate the long-term value of the "
    "indicated past intervention. Finish with a line 'SCORE: <0-100>'."
)


def parse_score(text: str) -> float:
    """Last ``SCORE:`` value in ``text``, clamped; 50 if none parses."""
    found = _SCORE_RE.findall(text or "")
    if not found:
        log.warning("critic reply has no SCORE line; using %.0f", FALLBACK_SCORE)
        return FALLBACK_SCORE
    return clamp_score(float(found[-1]))


def parse_template(text: str) -> str | None:
    found = _TEMPLATE_RE.findall(text or "")
    return found[-1] if found else None


@dataclass
class ChatClient:
    base_url: str
    model: str
    key_env: str = "REFLECTPLAN_LLM_KEY"
    timeout: float = 30.0
    max_retries: int = 2
    max_in_flight: int = 4
    transport: httpx.BaseTransport | None = None
    trace: list[dict] = field(default_factory=list)

    def __post_init__(self):
        self._sem = threading.BoundedSemaphore(self.max_in_flight)
        self._lock = threading.Lock()

    def _headers(self) -> dict:
        key = os.environ.get(self.key_env)
        return {"Authorization": f"Bearer {key}"} if key else {}

    def complete(self, messages: list[dict], temperature: float = 0.0, n: int = 1) -> list[str]:
        body = {"model": self.model, "messages": messages, "temperature": temperature, "n": n}
        url = self.base_url.rstrip("/") + "/chat/completions"
        last_err: Exception | None = None
        with self._sem:
            for attempt in range(self.max_retries + 1):
                try:
                    with httpx.Client(timeout=self.timeout, transport=self.transport) as client:
                        resp = client.post(url, json=body, headers=self._headers())
                    resp.raise_for_status()
                    data = resp.json()
                    texts = [c["message"]["content"] for c in data["choices"]]
                    with self._lock:
                        self.trace.append({"request": body, "response": data})
                    return texts
                except (httpx.HTTPError, KeyError, ValueError) as exc:
                    last_err = exc
                    log.warning("LLM request failed (attempt %d): %s", attempt + 1, exc)
                    if attempt < self.max_retries:
                        time.sleep(min(0.5 * 2**attempt, 4.0))
        with self._lock:
            self.trace.append({"request": body, "error": str(last_err)})
        raise AdapterUnavailable(f"chat endpoint {url} unavailable: {last_err}")


@dataclass
class LLMPolicy:
    """Actor backed by a chat model; inference only."""

    net: SupplyNetwork
    library: TemplateLibrary
    client: ChatClient
    backend: str = field(default="llm", init=False)
    trainable: bool = field(default=False, init=False)

    def _messages(self, ctx: PromptContext) -> list[dict]:
        listing = "\n".join(f"- {t.name}: {t.description}" for t in self.library.templates)
        return [
            {"role": "system", "content": ACTOR_SYSTEM.format(templates=listing)},
            {"role": "user", "content": ctx.to_prompt()},
        ]

    def sample(self, ctx: PromptContext, n: int, temperature: float, rng: np.random.Generator):
        texts = self.client.complete(self._messages(ctx), temperature, n)
        out = []
        for text in texts:
            name = parse_template(text)
            try:
                k = self.library.index(name)
            except UnknownTemplate:
                log.warning("actor reply names unknown template %r; using hold", name)
                k = self.library.index("hold")
            action = self.library.instantiate(k, ctx.obs, self.net)
            action.free_text = text
            # a chat endpoint does not expose sequence log-probabilities here
            out.append((action, 0.0))
        return out

    def log_prob(self, ctx: PromptContext, action: Intervention, temperature: float | None = None) -> float:
        return 0.0

    def to_dict(self) -> dict:
        return {"backend": self.backend, "model": self.client.model, "prompt_version": PROMPT_VERSION}


@dataclass
class LLMCritic:
    """Internal, external and retrospective critic backed by a chat model."""

    client: ChatClient

    def _score(self, system: str, user: str) -> CriticVerdict:
        text = self.client.complete(
            [{"role": "system", "content": system}, {"role": "user", "content": user}], 0.0, 1
        )[0]
        return CriticVerdict(text, parse_score(text))

    def critique(self, obs: Observation, action: Intervention, ctx: PromptContext | None = None) -> CriticVerdict:
        prompt = (ctx.to_prompt() if ctx is not None else "") + f"\nPROPOSED: {action.to_dict()}"
        return self._score(INTERNAL_SYSTEM, prompt)

    def assess(self, obs: Observation, action: Intervention, feedback: ExecFeedback) -> CriticVerdict:
        prompt = f"ACTION: {action.to_dict()}\nOUTCOME: reward={feedback.reward:.4f}, violations={feedback.violation_count}"
        return self._score(EXTERNAL_SYSTEM, prompt)

    def retrospective(self, buffer, index: int, final_obs: Observation) -> CriticVerdict:
        if not 0 <= index < len(buffer):
            raise IndexOutOfBuffer(f"index {index} outside buffer of size {len(buffer)}")
        lines = [
            f"step {rec.t}: {rec.action.template} reward={rec.feedback.reward:.4f} "
            f"violations={rec.feedback.violation_count}"
            for rec in buffer.records
        ]
        prompt = "WINDOW:\n" + "\n".join(lines) + f"\nRATE STEP: {buffer.records[index].t}"
        return self._score(RETRO_SYSTEM, prompt)
