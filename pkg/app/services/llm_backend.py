import hashlib
import json
import logging
import os
import tempfile
import threading
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Callable

from app.config import config
from app.exceptions import BackendError

logger = logging.getLogger(__name__)


def request_key(model_name: str, prompt: str) -> str:
    """Content hash identifying a (model, prompt) request"""
    return hashlib.sha256(f"{model_name}\n{prompt}".encode("utf-8")).hexdigest()


class LlmBackend(ABC):
    """Single-message chat completion with bounded in-flight requests."""

    def __init__(self, model_name: str, max_concurrency: int = 1):
        if max_concurrency < 1:
            raise ValueError("max_concurrency must be positive")
        self.model_name = model_name
        self.max_concurrency = max_concurrency
        self._slots = threading.BoundedSemaphore(max_concurrency)
        self._lock = threading.Lock()
        self.calls = 0

    def key(self, prompt: str) -> str:
        return request_key(self.model_name, prompt)

    def complete(self, prompt: str) -> str:
        with self._slots:
            with self._lock:
                self.calls += 1
            return self._complete(prompt)

    @abstractmethod
    def _complete(self, prompt: str) -> str:
        ...


class OllamaBackend(LlmBackend):
    """Chat backend served over HTTP by Ollama, greedy decoding"""

    def __init__(
        self,
        base_url: str | None = None,
        model_name: str | None = None,
        max_concurrency: int | None = None,
        timeout_s: float | None = None,
        max_retries: int | None = None,
    ):
        from langchain_ollama import ChatOllama

        super().__init__(
            model_name or config.ollama_model,
            max_concurrency or config.llm_concurrency,
        )
        client_kwargs = {"timeout": timeout_s or config.llm_timeout_s}
        if config.llm_api_key is not None:
            client_kwargs["headers"] = {
                "Authorization": f"Bearer {config.llm_api_key.get_secret_value()}"
            }
        llm = ChatOllama(
            base_url=base_url or config.ollama_url.unicode_string(),
            model=self.model_name,
            temperature=0,
            client_kwargs=client_kwargs,
        )
        retries = config.llm_max_retries if max_retries is None else max_retries
        # Exponential backoff between attempts
        self.chain = llm.with_retry(
            stop_after_attempt=retries + 1, wait_exponential_jitter=True
        )

    def _complete(self, prompt: str) -> str:
        try:
            message = self.chain.invoke([("human", prompt)])
        except Exception as e:
            raise BackendError(f"{self.model_name} request failed: {e}") from e
        return str(message.content)


class MockBackend(LlmBackend):
    """Deterministic, network-free backend.

    Canned responses are looked up by request hash; prompts without a canned
    response go to `responder` when one is given.
    """

    def __init__(
        self,
        responses: dict[str, str] | None = None,
        responder: Callable[[str], str] | None = None,
        model_name: str = "mock",
        max_concurrency: int = 1,
    ):
        super().__init__(model_name, max_concurrency)
        self.responses = dict(responses or {})
        self.responder = responder

    def add_response(self, prompt: str, response: str) -> None:
        self.responses[self.key(prompt)] = response

    @classmethod
    def from_fixtures(
        cls, fixtures_dir: Path | str, responder: Callable[[str], str] | None = None, **kwargs
    ) -> "MockBackend":
        """Load `*.json` fixture files holding `{prompt|request_hash, response}` entries"""
        backend = cls(responder=responder, **kwargs)
        for path in sorted(Path(fixtures_dir).glob("*.json")):
            payload = json.loads(path.read_text(encoding="utf-8"))
            entries = payload if isinstance(payload, list) else [payload]
            for entry in entries:
                if not isinstance(entry, dict) or "response" not in entry:
                    continue
                if "request_hash" in entry:
                    backend.responses[entry["request_hash"]] = entry["response"]
                elif "prompt" in entry:
                    backend.add_response(entry["prompt"], entry["response"])
        logger.info(f"Loaded {len(backend.responses)} mock responses from {fixtures_dir}")
        return backend

    def _complete(self, prompt: str) -> str:
        response = self.responses.get(self.key(prompt))
        if response is not None:
            return response
        if self.responder is not None:
            return self.responder(prompt)
        raise BackendError("mock backend has no response for this request")


class ResponseCache:
    """Write-once on-disk cache of responses keyed by request hash"""

    def __init__(self, cache_dir: Path | str):
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)

    def _path(self, key: str) -> Path:
        return self.cache_dir / f"{key}.json"

    def get(self, key: str) -> str | None:
        path = self._path(key)
        if not path.exists():
            return None
        return json.loads(path.read_text(encoding="utf-8"))["response"]

    def put(self, key: str, model_name: str, prompt: str, response: str) -> None:
        path = self._path(key)
        if path.exists():
            return
        payload = json.dumps({"model": model_name, "prompt": prompt, "response": response})
        fd, tmp_name = tempfile.mkstemp(dir=self.cache_dir, suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as handle:
                handle.write(payload)
            # link() refuses to overwrite, so the first writer wins
            os.link(tmp_name, path)
        except FileExistsError:
            pass
        finally:
            os.unlink(tmp_name)


class CachedBackend(LlmBackend):
    """Records every response in a ResponseCache; with `read` set, answers repeated requests from it"""

    def __init__(self, inner: LlmBackend, cache: ResponseCache, read: bool = True):
        super().__init__(inner.model_name, inner.max_concurrency)
        self.inner = inner
        self.cache = cache
        self.read = read
        self.hits = 0

    def complete(self, prompt: str) -> str:
        key = self.key(prompt)
        cached = self.cache.get(key) if self.read else None
        if cached is not None:
            with self._lock:
                self.hits += 1
            return cached
        response = self.inner.complete(prompt)
        self.cache.put(key, self.model_name, prompt, response)
        return response

    def _complete(self, prompt: str) -> str:
        return self.inner.complete(prompt)
