"""Uniform chat-completion client with retry semantics and deterministic stub backends.

The gateway never interprets content; success is decided downstream by the
evaluator's predicate. Stub backends make every test runnable offline and are
pure functions of (request, spec, per-row call ordinal).
"""
from __future__ import annotations

import json
import os
import threading
import time
import urllib.request
from dataclasses import dataclass
from typing import Optional, Tuple

from .core import ConfigurationError, SystemClock

FAULT_KINDS = ("rate_limit", "empty_content", "timeout")


@dataclass
class ModelRequest:
    model_alias: str
    system_text: str
    user_text: str
    temperature: float = 0.0
    max_tokens: int = 4000


@dataclass
class ModelResponse:
    content: str = ""
    finish_reason: str = "stop"
    provider_error: Optional[str] = None
    latency: float = 0.0
    prompt_tokens: Optional[int] = None
    output_tokens: Optional[int] = None


@dataclass(frozen=True)
class StubRule:
    """First-match-wins behavior rule. None conditions match everything."""

    output: str
    prompt_contains: Optional[str] = None
    user_contains: Optional[str] = None

    def matches(self, request: ModelRequest) -> bool:
        if self.prompt_contains is not None and self.prompt_contains not in request.system_text:
            return False
        if self.user_contains is not None and self.user_contains not in request.user_text:
            return False
        return True


@dataclass(frozen=True)
class FaultSpec:
    """Injected failure for rows whose user text matches the selector.

    Active for the first pass_count calls of each matching row, then clears.
    timeout faults sleep for sleep_seconds before answering normally, which
    trips the evaluator's per-row cap.
    """

    kind: str
    user_contains: Optional[str] = None
    pass_count: int = 1
    sleep_seconds: float = 3600.0

    def __post_init__(self):
        if self.kind not in FAULT_KINDS:
            raise ConfigurationError(f"fault kind must be one of {FAULT_KINDS}, got {self.kind!r}")


@dataclass(frozen=True)
class StubModelSpec:
    rules: Tuple[StubRule, ...] = ()
    default_output: str = ""
    faults: Tuple[FaultSpec, ...] = ()


def stub_spec_to_dict(spec: StubModelSpec) -> dict:
    return {
        "rules": [
            {"output": r.output, "prompt_contains": r.prompt_contains, "user_contains": r.user_contains}
            for r in spec.rules
        ],
        "default_output": spec.default_output,
        "faults": [
            {"kind": f.kind, "user_contains": f.user_contains, "pass_count": f.pass_count,
             "sleep_seconds": f.sleep_seconds}
            for f in spec.faults
        ],
    }


def stub_spec_from_dict(raw: dict) -> StubModelSpec:
    try:
        return StubModelSpec(
            rules=tuple(StubRule(**r) for r in raw.get("rules", [])),
            default_output=raw.get("default_output", ""),
            faults=tuple(FaultSpec(**f) for f in raw.get("faults", [])),
        )
    except TypeError as exc:
        raise ConfigurationError(f"bad stub model spec: {exc}") from exc


def _render(template: str, request: ModelRequest) -> str:
    return template.replace("{user_text}", request.user_text).replace(
        "{system_text}", request.system_text
    )


class StubBackend:
    """Deterministic offline model. Thread-safe; fault counters are per row."""

    def __init__(self, spec: StubModelSpec):
        self.spec = spec
        self.calls = 0
        self.calls_by_user: dict = {}
        self.requests: list = []
        self._fault_hits: dict = {}
        self._lock = threading.Lock()

    def complete(self, request: ModelRequest) -> ModelResponse:
        active_fault = None
        with self._lock:
            self.calls += 1
            self.calls_by_user[request.user_text] = self.calls_by_user.get(request.user_text, 0) + 1
            self.requests.append(request)
            for i, fault in enumerate(self.spec.faults):
                if fault.user_contains is not None and fault.user_contains not in request.user_text:
                    continue
                key = (i, request.user_text)
                hits = self._fault_hits.get(key, 0)
                if hits < fault.pass_count:
                    self._fault_hits[key] = hits + 1
                    active_fault = fault
                    break
        if active_fault is not None:
            if active_fault.kind == "rate_limit":
                return ModelResponse(content="", finish_reason="error",
                                     provider_error="rate_limited (429)")
            if active_fault.kind == "empty_content":
                return ModelResponse(content="", finish_reason="stop")
            time.sleep(active_fault.sleep_seconds)  # timeout: answer late
        for rule in self.spec.rules:
            if rule.matches(request):
                content = _render(rule.output, request)
                break
        else:
            content = _render(self.spec.default_output, request)
        return ModelResponse(
            content=content,
            finish_reason="stop",
            prompt_tokens=(len(request.system_text) + len(request.user_text)) // 4,
            output_tokens=len(content) // 4,
        )


class OpenAIChatBackend:
    """Minimal HTTP/JSON chat-completion adapter. Credentials come from the environment."""

    def __init__(self, endpoint: str, model: str, api_key_env: str, timeout: float = 120.0):
        self.endpoint = endpoint
        self.model = model
        self.timeout = timeout
        key = os.environ.get(api_key_env, "")
        if not key:
            raise ConfigurationError(
                f"credential environment variable {api_key_env!r} is not set"
            )
        self._key = key

    def complete(self, request: ModelRequest) -> ModelResponse:
        body = json.dumps({
            "model": self.model,
            "messages": [
                {"role": "system", "content": request.system_text},
                {"role": "user", "content": request.user_text},
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }).encode("utf-8")
        req = urllib.request.Request(
            self.endpoint,
            data=body,
            headers={"Content-Type": "application/json", "Authorization": f"Bearer {self._key}"},
        )
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            payload = json.load(resp)
        choice = payload["choices"][0]
        usage = payload.get("usage", {})
        return ModelResponse(
            content=choice.get("message", {}).get("content") or "",
            finish_reason=choice.get("finish_reason", "stop"),
            prompt_tokens=usage.get("prompt_tokens"),
            output_tokens=usage.get("completion_tokens"),
        )


class ModelGateway:
    """Alias registry + retry policy. Safe for concurrent use from the eval pool."""

    def __init__(self, registry: dict, clock=None):
        self.registry = dict(registry)
        self.clock = clock if clock is not None else SystemClock()

    def backend(self, alias: str):
        try:
            return self.registry[alias]
        except KeyError:
            raise ConfigurationError(
                f"model alias {alias!r} is not in the gateway registry "
                f"(known: {sorted(self.registry)})"
            ) from None

    def complete(self, request: ModelRequest) -> ModelResponse:
        backend = self.backend(request.model_alias)
        start = self.clock.now()
        try:
            response = backend.complete(request)
        except Exception as exc:  # transport-level failure becomes a response field
            response = ModelResponse(content="", finish_reason="error",
                                     provider_error=f"transport: {exc}")
        response.latency = self.clock.now() - start
        return response

    def complete_with_retry(
        self, request: ModelRequest, max_retries: int, base_delay: float = 1.0
    ) -> ModelResponse:
        """Retry on transport/provider errors only, never on empty content."""
        response = self.complete(request)
        attempt = 0
        while response.provider_error is not None and attempt < max_retries:
            self.clock.sleep(base_delay * (2 ** attempt))
            attempt += 1
            response = self.complete(request)
        return response


def build_backend(entry: dict, base_dir: str = "."):
    kind = entry.get("kind")
    if kind == "stub":
        if "spec_file" in entry:
            path = os.path.join(base_dir, entry["spec_file"])
            try:
                with open(path, "r", encoding="utf-8") as fh:
                    raw = json.load(fh)
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigurationError(f"cannot load stub spec {path}: {exc}") from exc
            return StubBackend(stub_spec_from_dict(raw))
        return StubBackend(stub_spec_from_dict(entry.get("spec", {})))
    if kind == "openai_chat":
        try:
            return OpenAIChatBackend(
                endpoint=entry["endpoint"],
                model=entry["model"],
                api_key_env=entry.get("api_key_env", "OPENAI_API_KEY"),
                timeout=entry.get("timeout", 120.0),
            )
        except KeyError as exc:
            raise ConfigurationError(f"openai_chat backend entry missing {exc}") from exc
    raise ConfigurationError(f"unknown backend kind {kind!r}")


def load_registry(path: str, clock=None) -> ModelGateway:
    """Registry file: {alias: backend entry}. Relative stub spec paths resolve beside the file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigurationError(f"registry file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"registry file {path} is not valid JSON: {exc}") from exc
    base = os.path.dirname(os.path.abspath(path))
    return ModelGateway(
        {alias: build_backend(entry, base_dir=base) for alias, entry in raw.items()},
        clock=clock,
    )
