"""Backend-agnostic chat-completion access with caching, retries, and metering.

One gateway fronts any of three backends: a live HTTP endpoint speaking the
common chat wire protocol (role/content message lists in JSON bodies), a
replay mock that answers from a fingerprint table, and a memo-trap mock that
deterministically emulates a constraint-overriding translator plus a
constraint-fixing reviser.

Responses are cached on disk keyed by a content fingerprint over
(model, temperature, messages); cached calls are flagged and excluded from
marginal cost totals.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import requests

from .memo_trap import MemoTrapParams, MemoTrapState, render_hypothesis, override_draw

logger = logging.getLogger(__name__)


class GatewayError(Exception):
    """Base error for backend access problems."""

    def __init__(self, message: str, request_tag: str = ""):
        super().__init__(message)
        self.request_tag = request_tag


class TransportError(GatewayError):
    """Transient transport failure (network, 5xx, timeouts)."""


class AuthError(GatewayError):
    """Authentication or authorization rejected by the backend."""


class QuotaError(GatewayError):
    """Backend rate/quota limit hit (retryable)."""


class ReplayMissError(GatewayError):
    """Replay mock has no scripted response for a request fingerprint."""


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: tuple[tuple[str, str], ...]
    temperature: float = 0.0
    max_output: int = 1024
    request_tag: str = ""

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not self.messages:
            raise ValueError("messages must be non-empty")
        object.__setattr__(self, "messages", tuple(tuple(m) for m in self.messages))


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int
    completion_tokens: int
    cost_currency_units: float
    estimated: bool = False


ZERO_USAGE = Usage(0, 0, 0.0)


@dataclass(frozen=True)
class ChatResponse:
    text: str
    usage: Usage
    backend_id: str
    cached: bool = False
    latency_ms: float = 0.0
    request_tag: str = ""


@dataclass(frozen=True)
class PriceTable:
    """Per-1k-token prices in arbitrary currency units."""

    input_per_1k: float = 0.0
    output_per_1k: float = 0.0

    def cost(self, prompt_tokens: int, completion_tokens: int) -> float:
        return (
            prompt_tokens / 1000 * self.input_per_1k
            + completion_tokens / 1000 * self.output_per_1k
        )


@dataclass(frozen=True)
class RetryPolicy:
    max_retries: int = 3
    backoff_base_s: float = 0.2


def make_request_tag(unit_id: str, stage: str, iteration: int) -> str:
    return f"{unit_id}:{stage}:{iteration}"


def parse_request_tag(tag: str) -> tuple[str, str, int]:
    unit_id, stage, iteration = tag.rsplit(":", 2)
    return unit_id, stage, int(iteration)


def fingerprint(request: ChatRequest) -> str:
    """Stable content hash over (model, temperature, messages).

    Independent of request_tag, max_output, and wall clock, so retries and
    re-runs of the same prompt share one cache entry.
    """
    payload = json.dumps(
        {
            "model": request.model,
            "temperature": request.temperature,
            "messages": [[role, content] for role, content in request.messages],
        },
        ensure_ascii=False,
        sort_keys=True,
        separators=(",", ":"),
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


# Rough billing heuristic for backends that do not report usage: CJK
# characters count as one token each, everything else as four characters
# per token.
def estimate_tokens(text: str) -> int:
    cjk = sum(1 for ch in text if "㐀" <= ch <= "鿿" or "豈" <= ch <= "﫿")
    other = len(text) - cjk
    return cjk + math.ceil(other / 4)


@dataclass(frozen=True)
class BackendResult:
    """Raw backend answer before pricing/caching is applied."""

    text: str
    prompt_tokens: int | None = None
    completion_tokens: int | None = None
    latency_ms: float | None = None


@dataclass(frozen=True)
class BackendConfig:
    """Connection settings for an HTTP chat-completion backend."""

    endpoint: str
    model: str
    auth_header: str = "Authorization"
    auth_env: str = "TARMT_API_KEY"
    auth_scheme: str = "Bearer"
    price_input_per_1k: float = 0.0
    price_output_per_1k: float = 0.0
    rate_limit_per_s: float = 0.0
    max_retries: int = 3
    backoff_base_s: float = 0.5
    timeout_s: float = 60.0

    @classmethod
    def from_file(cls, path: str | Path) -> "BackendConfig":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(**data)

    @property
    def price_table(self) -> PriceTable:
        return PriceTable(self.price_input_per_1k, self.price_output_per_1k)

    @property
    def retry_policy(self) -> RetryPolicy:
        return RetryPolicy(self.max_retries, self.backoff_base_s)


class HttpBackend:
    """Chat-completion over HTTP with JSON bodies (OpenAI-style wire shape)."""

    def __init__(self, config: BackendConfig):
        self.config = config
        self.model = config.model
        self.backend_id = f"http:{config.model}"

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        secret = os.environ.get(self.config.auth_env, "")
        if secret:
            value = f"{self.config.auth_scheme} {secret}".strip()
            headers[self.config.auth_header] = value
        return headers

    def raw_complete(self, request: ChatRequest) -> BackendResult:
        payload = {
            "model": request.model,
            "messages": [
                {"role": role, "content": content} for role, content in request.messages
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_output,
        }
        try:
            resp = requests.post(
                self.config.endpoint,
                json=payload,
                headers=self._headers(),
                timeout=self.config.timeout_s,
            )
        except requests.RequestException as exc:
            raise TransportError(str(exc), request.request_tag) from exc
        if resp.status_code in (401, 403):
            raise AuthError(
                f"backend rejected credentials (HTTP {resp.status_code})",
                request.request_tag,
            )
        if resp.status_code == 429:
            raise QuotaError("backend rate/quota limit (HTTP 429)", request.request_tag)
        if resp.status_code >= 500:
            raise TransportError(
                f"backend server error (HTTP {resp.status_code})", request.request_tag
            )
        if resp.status_code != 200:
            raise GatewayError(
                f"unexpected backend status {resp.status_code}: {resp.text[:200]}",
                request.request_tag,
            )
        try:
            body = resp.json()
            text = body["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise GatewayError(
                f"malformed backend response: {exc}", request.request_tag
            ) from exc
        usage = body.get("usage") or {}
        return BackendResult(
            text=text,
            prompt_tokens=usage.get("prompt_tokens"),
            completion_tokens=usage.get("completion_tokens"),
        )


class ReplayBackend:
    """Deterministic mock answering from a fingerprint -> response table."""

    def __init__(self, table: dict[str, str], model: str = "replay-model"):
        self.table = dict(table)
        self.model = model
        self.backend_id = "mock-replay"

    def raw_complete(self, request: ChatRequest) -> BackendResult:
        fp = fingerprint(request)
        if fp not in self.table:
            raise ReplayMissError(
                f"no scripted response for fingerprint {fp}", request.request_tag
            )
        return BackendResult(text=self.table[fp], latency_ms=0.0)


def load_replay_file(path: str | Path) -> dict[str, str]:
    """Read a replay table from JSONL of ``{"fingerprint": .., "response": ..}``."""
    table: dict[str, str] = {}
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            table[rec["fingerprint"]] = rec["response"]
    return table


_PAIR_LINE_LABELS = ("Constraints:", "Required expressions:")
_UNCOMPLETED_LABELS = (
    "Uncompleted constraints:",
    "Constraints still missing from the translation:",
)
_CURRENT_LABELS = ("Current translation:", "Translation (")


def _live_message(request: ChatRequest) -> str:
    for role, content in reversed(request.messages):
        if role == "user":
            return content
    return request.messages[-1][1]


def _labeled_rest(text: str, labels: tuple[str, ...]) -> str | None:
    for line in text.splitlines():
        stripped = line.strip()
        for label in labels:
            if stripped.startswith(label):
                rest = stripped[len(label):]
                # "Translation (Chinese):" keeps text after the closing colon.
                if label.endswith("(") and "):" in rest:
                    rest = rest.split("):", 1)[1]
                return rest.strip()
    return None


def _parse_pairs(serialized: str | None) -> list[tuple[str, str]]:
    if not serialized or serialized == "(none)":
        return []
    pairs = []
    for entry in serialized.split("; "):
        if "->" not in entry:
            continue
        src, _, tgt = entry.partition("->")
        pairs.append((src.strip(), tgt.strip()))
    return pairs


class MemoTrapBackend:
    """Scripted translator/reviser driven entirely by the prompt content.

    Translate prompts yield a scaffold hypothesis in which each constraint is
    either embedded or overridden by a seeded draw; revise prompts return the
    current translation with the first ``fix_per_revision`` uncompleted
    targets appended; verdict prompts answer with a literal scan. Responses
    are a pure function of the request, so the backend is reentrant and
    deterministic.
    """

    def __init__(self, params: MemoTrapParams, model: str = "memo-trap"):
        self.params = params
        self.model = model
        self.backend_id = (
            f"mock-memo-trap:p={params.override_prob_per_constraint}"
            f":fix={params.fix_per_revision}:seed={params.seed}"
        )

    def raw_complete(self, request: ChatRequest) -> BackendResult:
        try:
            unit_id, stage, _ = parse_request_tag(request.request_tag)
        except ValueError:
            unit_id, stage = "", "translate"
        live = _live_message(request)
        if stage == "revise":
            text = self._revise(live)
        elif stage == "verify":
            text = self._verify(live)
        else:
            text = self._translate(unit_id, live)
        return BackendResult(text=text, latency_ms=0.0)

    def _translate(self, unit_id: str, live: str) -> str:
        pairs = _parse_pairs(_labeled_rest(live, _PAIR_LINE_LABELS))
        overridden = {
            i: override_draw(self.params.seed, unit_id, i)
            < self.params.override_prob_per_constraint
            for i in range(len(pairs))
        }
        state = MemoTrapState(
            unit_id=unit_id,
            targets=tuple(tgt for _, tgt in pairs),
            per_constraint_overridden=overridden,
        )
        return render_hypothesis(state)

    def _revise(self, live: str) -> str:
        current = _labeled_rest(live, _CURRENT_LABELS) or ""
        pairs = _parse_pairs(_labeled_rest(live, _UNCOMPLETED_LABELS))
        fixes = [f"[T:{tgt}]" for _, tgt in pairs[: self.params.fix_per_revision]]
        if not fixes:
            return current
        return (current + " " + " ".join(fixes)).strip()

    def _verify(self, live: str) -> str:
        current = _labeled_rest(live, _CURRENT_LABELS) or ""
        pairs = _parse_pairs(_labeled_rest(live, _PAIR_LINE_LABELS))
        missing = [
            f"{src} -> {tgt}"
            for src, tgt in pairs
            if tgt.casefold() not in current.casefold()
        ]
        return "\n".join(missing) if missing else "NONE"


@dataclass(frozen=True)
class MockScript:
    """Configuration of the scripted mock backends."""

    mode: str  # "replay" or "memo_trap"
    replay_table: dict[str, str] = field(default_factory=dict)
    memo_trap_params: MemoTrapParams = field(default_factory=MemoTrapParams)

    def __post_init__(self) -> None:
        if self.mode not in ("replay", "memo_trap"):
            raise ValueError(f"unknown mock mode: {self.mode!r}")


def make_mock_backend(script: MockScript):
    if script.mode == "replay":
        return ReplayBackend(script.replay_table)
    return MemoTrapBackend(script.memo_trap_params)


class ResponseCache:
    """Disk cache of backend responses keyed by request fingerprint.

    Reads are lock-free (writes are atomic renames); writes are serialized.
    """

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._write_lock = threading.Lock()

    def _path(self, fp: str) -> Path:
        return self.directory / f"{fp}.json"

    def get(self, fp: str) -> dict | None:
        path = self._path(fp)
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            return None
        except (OSError, json.JSONDecodeError):
            logger.warning("unreadable cache entry %s; ignoring", path)
            return None

    def put(self, fp: str, record: dict) -> None:
        with self._write_lock:
            fd, tmp = tempfile.mkstemp(dir=self.directory, suffix=".tmp")
            try:
                with os.fdopen(fd, "w", encoding="utf-8") as fh:
                    json.dump(record, fh, ensure_ascii=False, sort_keys=True)
                os.replace(tmp, self._path(fp))
            except BaseException:
                if os.path.exists(tmp):
                    os.unlink(tmp)
                raise


class ChatGateway:
    """Front door for chat completion: cache, retry, rate limit, pricing.

    Thread-safe; supports up to ``max_in_flight`` concurrent backend calls.
    """

    def __init__(
        self,
        backend,
        *,
        cache_dir: str | Path | None = None,
        price_table: PriceTable | None = None,
        retry: RetryPolicy | None = None,
        rate_limit_per_s: float = 0.0,
        max_in_flight: int = 8,
    ):
        self.backend = backend
        self.cache = ResponseCache(cache_dir) if cache_dir else None
        self.price_table = price_table or PriceTable()
        self.retry = retry or RetryPolicy()
        self._min_interval = 1.0 / rate_limit_per_s if rate_limit_per_s > 0 else 0.0
        self._rate_lock = threading.Lock()
        self._next_slot = 0.0
        self._inflight = threading.BoundedSemaphore(max_in_flight)
        self._stats_lock = threading.Lock()
        self.live_calls = 0
        self.cached_hits = 0

    @property
    def model(self) -> str:
        return self.backend.model

    @property
    def backend_id(self) -> str:
        return self.backend.backend_id

    def _rate_wait(self) -> None:
        if self._min_interval <= 0:
            return
        with self._rate_lock:
            now = time.monotonic()
            slot = max(now, self._next_slot)
            self._next_slot = slot + self._min_interval
        delay = slot - now
        if delay > 0:
            time.sleep(delay)

    def _usage_for(self, request: ChatRequest, result: BackendResult) -> Usage:
        if result.prompt_tokens is not None and result.completion_tokens is not None:
            pt, ct, estimated = result.prompt_tokens, result.completion_tokens, False
        else:
            pt = sum(estimate_tokens(content) for _, content in request.messages)
            ct = estimate_tokens(result.text)
            estimated = True
        return Usage(pt, ct, self.price_table.cost(pt, ct), estimated)

    def complete(self, request: ChatRequest) -> ChatResponse:
        """Resolve one chat request, via cache when possible.

        Backend text is returned verbatim apart from a single trailing
        whitespace trim. Transient failures are retried with exponential
        backoff; exhausting retries raises TransportError carrying the
        request tag.
        """
        fp = fingerprint(request)
        if self.cache is not None:
            record = self.cache.get(fp)
            if record is not None:
                with self._stats_lock:
                    self.cached_hits += 1
                usage = Usage(
                    record["prompt_tokens"],
                    record["completion_tokens"],
                    self.price_table.cost(
                        record["prompt_tokens"], record["completion_tokens"]
                    ),
                    record["estimated"],
                )
                return ChatResponse(
                    text=record["text"],
                    usage=usage,
                    backend_id=record["backend_id"],
                    cached=True,
                    latency_ms=0.0,
                    request_tag=request.request_tag,
                )

        attempt = 0
        with self._inflight:
            while True:
                self._rate_wait()
                started = time.perf_counter()
                try:
                    result = self.backend.raw_complete(request)
                    break
                except (TransportError, QuotaError) as exc:
                    attempt += 1
                    if attempt > self.retry.max_retries:
                        raise TransportError(
                            f"retries exhausted after {attempt} attempt(s): {exc}",
                            request.request_tag,
                        ) from exc
                    delay = self.retry.backoff_base_s * (2 ** (attempt - 1))
                    logger.warning(
                        "transient backend failure (%s); retry %d/%d in %.2fs",
                        exc,
                        attempt,
                        self.retry.max_retries,
                        delay,
                    )
                    time.sleep(delay)
            elapsed_ms = (time.perf_counter() - started) * 1000.0

        text = result.text.rstrip()
        usage = self._usage_for(request, result)
        latency = result.latency_ms if result.latency_ms is not None else elapsed_ms
        response = ChatResponse(
            text=text,
            usage=usage,
            backend_id=self.backend.backend_id,
            cached=False,
            latency_ms=latency,
            request_tag=request.request_tag,
        )
        with self._stats_lock:
            self.live_calls += 1
        if self.cache is not None:
            self.cache.put(
                fp,
                {
                    "text": text,
                    "prompt_tokens": usage.prompt_tokens,
                    "completion_tokens": usage.completion_tokens,
                    "estimated": usage.estimated,
                    "backend_id": self.backend.backend_id,
                },
            )
        return response


@dataclass
class GroupUsage:
    calls: int = 0
    cached_calls: int = 0
    prompt_tokens: int = 0
    completion_tokens: int = 0
    cost: float = 0.0
    latency_ms: float = 0.0

    def add(self, response: ChatResponse) -> None:
        self.calls += 1
        if response.cached:
            # Cached calls count as calls but add no marginal cost/tokens.
            self.cached_calls += 1
            return
        self.prompt_tokens += response.usage.prompt_tokens
        self.completion_tokens += response.usage.completion_tokens
        self.cost += response.usage.cost_currency_units
        self.latency_ms += response.latency_ms


@dataclass
class UsageSummary:
    by_group: dict[tuple[str, int], GroupUsage]
    total: GroupUsage


def meter(responses: list[ChatResponse]) -> UsageSummary:
    """Aggregate usage per (stage, iteration) and in total.

    Group keys are parsed from each response's request tag; untaggable
    responses land in ("unknown", -1).
    """
    by_group: dict[tuple[str, int], GroupUsage] = {}
    total = GroupUsage()
    for response in responses:
        try:
            _, stage, iteration = parse_request_tag(response.request_tag)
            key = (stage, iteration)
        except ValueError:
            key = ("unknown", -1)
        by_group.setdefault(key, GroupUsage()).add(response)
        total.add(response)
    return UsageSummary(by_group, total)
