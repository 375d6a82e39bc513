"""Chat-completion transport for generator and judge ports, plus scripted mocks.

Every network connection the package makes goes through :class:`ChatClient`.
Everything else talks to a *port*: any object with

    complete(messages, **meta) -> str

where ``meta`` carries routing hints (``sample_id``, ``purpose``,
``temperature``, ``seed``).  :class:`MockEndpoint` implements the same
method from a script so the whole pipeline runs offline.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import re
import threading
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Protocol, Sequence

import httpx

logger = logging.getLogger(__name__)

__all__ = [
    "Port",
    "EndpointConfig",
    "ChatClient",
    "MockEndpoint",
    "MockScript",
    "TransportError",
    "ConfigError",
    "PromptError",
    "render_prompt",
    "TEMPLATE_PLACEHOLDERS",
    "make_port",
    "prompt_hash",
]

Message = Mapping[str, str]


class Port(Protocol):
    def complete(self, messages: Sequence[Message], **meta: Any) -> str: ...


class ConfigError(ValueError):
    """Endpoint misconfiguration, detected before any request is sent."""


class TransportError(RuntimeError):
    def __init__(self, message: str, attempts: list[dict] | None = None):
        super().__init__(message)
        self.attempts = attempts or []


class _Retryable(Exception):
    pass


class _NotRetryable(Exception):
    pass


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    model: str
    token_env: str | None = None  # name of the env var holding the API key
    path: str = "/chat/completions"
    timeout: float = 60.0
    max_retries: int = 3
    backoff_base: float = 0.5
    backoff_max: float = 30.0
    jitter: float = 0.1
    temperature: float = 0.7
    max_tokens: int = 1024
    max_in_flight: int = 8
    send_seed: bool = False
    response_path: tuple = ("choices", 0, "message", "content")
    extra_body: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.timeout <= 0:
            raise ConfigError("timeout must be > 0")
        if self.max_retries < 0:
            raise ConfigError("max_retries must be >= 0")
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        if self.max_in_flight < 1:
            raise ConfigError("max_in_flight must be >= 1")
        object.__setattr__(self, "response_path", tuple(self.response_path))

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "EndpointConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown endpoint settings: {', '.join(sorted(unknown))}")
        if "token" in data or "api_key" in data:
            raise ConfigError("endpoint configs name an env var (token_env), never a token")
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> "EndpointConfig":
        path = Path(path)
        text = path.read_text(encoding="utf-8")
        if path.suffix == ".toml":
            import tomli

            data = tomli.loads(text)
        else:
            data = json.loads(text)
        return cls.from_mapping(data.get("endpoint", data))


def backoff_delays(n: int, base: float, cap: float, jitter: float, rng: random.Random) -> list[float]:
    """Exponential backoff with multiplicative jitter, forced nondecreasing."""
    delays: list[float] = []
    for i in range(n):
        d = min(cap, base * 2**i) * (1.0 + jitter * rng.random())
        delays.append(max(d, delays[-1]) if delays else d)
    return delays


def _with_retries(attempt: Callable[[], str], max_retries: int, delays: Sequence[float],
                  sleep: Callable[[float], None], label: str) -> str:
    log: list[dict] = []
    for i in range(max_retries + 1):
        try:
            return attempt()
        except _Retryable as exc:
            log.append({"attempt": i + 1, "error": str(exc), "retryable": True})
            if i < max_retries:
                logger.debug("%s attempt %d failed (%s); retrying", label, i + 1, exc)
                sleep(delays[i])
        except _NotRetryable as exc:
            log.append({"attempt": i + 1, "error": str(exc), "retryable": False})
            raise TransportError(f"{label}: {exc}", log) from None
    raise TransportError(f"{label}: gave up after {len(log)} attempts", log)


def _dig(data: Any, path: Iterable) -> Any:
    for key in path:
        data = data[key]
    return data


class ChatClient:
    """HTTP client for a chat-completions style endpoint.

    Retries 5xx responses and timeouts with jittered exponential backoff and
    never retries 4xx.  At most ``max_in_flight`` requests run at once.
    """

    def __init__(self, config: EndpointConfig, transport: httpx.BaseTransport | None = None,
                 sleep: Callable[[float], None] = time.sleep, seed: int = 0):
        self.config = config
        self._token = self._resolve_token()
        self._http = httpx.Client(transport=transport, timeout=config.timeout)
        self._sleep = sleep
        self._rng = random.Random(seed)
        self._rng_lock = threading.Lock()
        self._slots = threading.BoundedSemaphore(config.max_in_flight)
        self.attempts = 0  # total HTTP attempts made, for diagnostics

    def _resolve_token(self) -> str | None:
        env = self.config.token_env
        if not env:
            return None
        token = os.environ.get(env)
        if not token:
            raise ConfigError(f"environment variable {env} is not set")
        return token

    @property
    def name(self) -> str:
        return self.config.model

    def complete(self, messages: Sequence[Message], **meta: Any) -> str:
        cfg = self.config
        temperature = meta.get("temperature")
        body = {
            "model": cfg.model,
            "messages": [{"role": m["role"], "content": m["content"]} for m in messages],
            "temperature": cfg.temperature if temperature is None else temperature,
            "max_tokens": cfg.max_tokens,
            **cfg.extra_body,
        }
        if cfg.send_seed and meta.get("seed") is not None:
            body["seed"] = meta["seed"]
        headers = {"Authorization": f"Bearer {self._token}"} if self._token else {}
        url = cfg.base_url.rstrip("/") + cfg.path

        def attempt() -> str:
            self.attempts += 1
            try:
                resp = self._http.post(url, json=body, headers=headers)
            except httpx.TimeoutException as exc:
                raise _Retryable(f"timeout: {exc}") from None
            except httpx.TransportError as exc:
                raise _Retryable(f"transport: {exc}") from None
            if resp.status_code >= 500:
                raise _Retryable(f"HTTP {resp.status_code}")
            if resp.status_code >= 400:
                raise _NotRetryable(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                content = _dig(resp.json(), cfg.response_path)
            except (ValueError, KeyError, IndexError, TypeError):
                raise _NotRetryable("response body does not match the configured response path") from None
            return "" if content is None else str(content)

        with self._rng_lock:
            delays = backoff_delays(cfg.max_retries, cfg.backoff_base, cfg.backoff_max, cfg.jitter, self._rng)
        with self._slots:
            return _with_retries(attempt, cfg.max_retries, delays, self._sleep, cfg.model)

    def close(self) -> None:
        self._http.close()

    def __deepcopy__(self, memo):
        # a port is a shared handle; estimator cloning must not duplicate it
        return self


# --------------------------------------------------------------------------
# mocks
# --------------------------------------------------------------------------


def prompt_hash(messages: Sequence[Message]) -> str:
    payload = json.dumps([[m["role"], m["content"]] for m in messages], ensure_ascii=False)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


@dataclass
class MockScript:
    """Canned replies for :class:`MockEndpoint`.

    ``replies`` is either a list (served in order) or a mapping whose keys
    are ``"<sample_id>:<purpose>"``, ``"<sample_id>"``, ``"<purpose>"`` or a
    :func:`prompt_hash`.  ``failures`` maps the same keys (or ``"*"``) to a
    list of injected failures consumed one per attempt: ``"5xx"``,
    ``"timeout"`` (both retried) or ``"4xx"`` (not retried).
    """

    replies: dict | list = field(default_factory=dict)
    default: str | None = None
    failures: dict[str, list[str]] = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | Path) -> "MockScript":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(data.get("replies", {}), data.get("default"), data.get("failures", {}))


class MockEndpoint:
    def __init__(self, script: MockScript | None = None, responder: Callable[..., str] | None = None,
                 max_retries: int = 0, name: str = "mock"):
        self.script = script or MockScript()
        self.responder = responder
        self.max_retries = max_retries
        self.name = name
        self._lock = threading.Lock()
        self._queue = list(self.script.replies) if isinstance(self.script.replies, list) else None
        self._failures = {k: list(v) for k, v in self.script.failures.items()}
        self.calls: list[dict] = []
        self.attempts = 0

    def __deepcopy__(self, memo):
        return self

    @classmethod
    def constant_judge(cls, verdict: bool = True, score: float = 1.0, name: str = "mock") -> "MockEndpoint":
        def respond(messages, purpose=None, **_):
            if purpose == "judge_score":
                return repr(float(score))
            return f"<think>scripted</think><judge>{verdict}</judge>"

        return cls(responder=respond, name=name)

    def _keys(self, messages: Sequence[Message], meta: Mapping[str, Any]) -> list[str]:
        sid, purpose = meta.get("sample_id"), meta.get("purpose")
        keys = []
        if sid is not None and purpose is not None:
            keys.append(f"{sid}:{purpose}")
        if sid is not None:
            keys.append(str(sid))
        if purpose is not None:
            keys.append(str(purpose))
        keys.append(prompt_hash(messages))
        return keys

    def _reply(self, messages, keys, meta) -> str:
        replies = self.script.replies
        if isinstance(replies, Mapping):
            for k in keys:
                if k in replies:
                    return replies[k]
        elif self._queue:
            return self._queue.pop(0)
        if self.responder is not None:
            return self.responder(messages, **meta)
        if self.script.default is not None:
            return self.script.default
        raise _NotRetryable(f"mock script has no reply for keys {keys}")

    def complete(self, messages: Sequence[Message], **meta: Any) -> str:
        keys = self._keys(messages, meta)

        def attempt() -> str:
            with self._lock:
                self.attempts += 1
                self.calls.append({"keys": keys, "meta": dict(meta)})
                for k in keys + ["*"]:
                    pending = self._failures.get(k)
                    if pending:
                        kind = pending.pop(0)
                        if kind in ("5xx", "timeout"):
                            raise _Retryable(f"injected {kind}")
                        raise _NotRetryable(f"injected {kind}")
                return self._reply(messages, keys, meta)

        return _with_retries(attempt, self.max_retries, [0.0] * self.max_retries, lambda _: None, self.name)


def make_port(spec: str, *, seed: int = 0, max_in_flight: int | None = None) -> Port:
    """Build a port from a CLI spec.

    ``mock:true`` / ``mock:false`` answer every gate check with that verdict
    and every score request with 1.0 / 0.0; ``mock:score=0.8`` answers score
    requests with 0.8; ``mock:<file.json>`` loads a :class:`MockScript`.
    ``http(s)://...`` or a ``.toml``/``.json`` endpoint file builds a
    :class:`ChatClient`.
    """
    if spec.startswith("mock:"):
        body = spec[5:]
        if body.lower() in ("true", "pass", "accept"):
            return MockEndpoint.constant_judge(True, 1.0, name=spec)
        if body.lower() in ("false", "fail", "reject"):
            return MockEndpoint.constant_judge(False, 0.0, name=spec)
        if body.startswith("score="):
            score = float(body[6:])
            return MockEndpoint.constant_judge(score >= 0.5, score, name=spec)
        if Path(body).is_file():
            return MockEndpoint(MockScript.load(body), name=spec)
        raise ConfigError(f"unknown mock spec {spec!r}")
    if spec.startswith(("http://", "https://")):
        model = os.environ.get("FCURATE_MODEL", "default")
        cfg = EndpointConfig(base_url=spec, model=model, token_env=os.environ.get("FCURATE_TOKEN_ENV") or None)
    elif Path(spec).is_file():
        cfg = EndpointConfig.load(spec)
    else:
        raise ConfigError(f"endpoint {spec!r} is neither a mock spec, a URL nor a config file")
    if max_in_flight is not None:
        cfg = EndpointConfig.from_mapping({**cfg.__dict__, "max_in_flight": max_in_flight})
    return ChatClient(cfg, seed=seed)


# --------------------------------------------------------------------------
# prompt templates
# --------------------------------------------------------------------------

TEMPLATE_PLACEHOLDERS: dict[str, tuple[str, ...]] = {
    "response_id": ("<refANS>",),
    "query_tool_id": ("<query>", "<tools>"),
    "cot_id": ("<CoT process>", "<refFC>"),
    "func_param_id": ("<query>", "<tools>", "<refFC>"),
    "format_id": ("<query>", "<tools>", "<refFC>"),
    "judge_score": ("<query>", "<tools>", "<response>"),
    "generator": ("<tools>",),
}

_FIELD_ALIASES = {
    "refANS": "<refANS>", "ref_answer": "<refANS>", "answer": "<refANS>",
    "query": "<query>",
    "tools": "<tools>",
    "CoT process": "<CoT process>", "cot": "<CoT process>",
    "refFC": "<refFC>", "ref_fc": "<refFC>",
    "response": "<response>",
}


class PromptError(KeyError):
    pass


_template_cache: dict[str, str] = {}


def load_template(template_id: str) -> str:
    if template_id not in TEMPLATE_PLACEHOLDERS:
        raise PromptError(f"unknown template {template_id!r}")
    if template_id not in _template_cache:
        text = resources.files("fcurate").joinpath("prompts", f"{template_id}.txt").read_text(encoding="utf-8")
        _template_cache[template_id] = text.rstrip("\n")
    return _template_cache[template_id]


def render_prompt(template_id: str, fields: Mapping[str, Any]) -> list[dict[str, str]]:
    """Fill a template and wrap it as chat messages.

    ``fields`` may be keyed by placeholder (``"<refFC>"``) or by alias
    (``"ref_fc"``, ``"cot"``, ...).  Values are substituted in one pass, so
    placeholder-like text inside a value is left alone.  The ``generator``
    template also takes ``query`` and an optional ``history``.
    """
    template = load_template(template_id)
    values: dict[str, str] = {}
    for key, value in fields.items():
        ph = key if key.startswith("<") else _FIELD_ALIASES.get(key)
        if ph is None or value is None:
            continue
        values[ph] = value if isinstance(value, str) else json.dumps(value, ensure_ascii=False)
    needed = TEMPLATE_PLACEHOLDERS[template_id]
    missing = [ph for ph in needed if ph not in values]
    if missing:
        raise PromptError(f"template {template_id!r} needs {', '.join(missing)}")
    pattern = re.compile("|".join(re.escape(ph) for ph in needed))
    text = pattern.sub(lambda m: values[m.group(0)], template)
    if template_id != "generator":
        return [{"role": "user", "content": text}]
    if "<query>" not in values:
        raise PromptError("template 'generator' needs <query>")
    messages = [{"role": "system", "content": text}]
    for turn in fields.get("history") or []:
        messages.append({"role": turn["role"], "content": turn["content"]})
    messages.append({"role": "user", "content": values["<query>"]})
    return messages
