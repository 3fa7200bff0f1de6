"""Chat backends: message list in, completion text out.

The scripted backend replays per-role replies from a JSON fixture so every run can be
reproduced offline. The HTTP backends talk to an OpenAI-compatible chat endpoint or to
the Gemini generateContent API.
"""

import dataclasses
import json
import logging
import os
import re
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional

import requests

from config import DEFAULT_GEMINI_MODEL, GENERATION_CONFIG, HTTP_RETRIES, BackendConfig
from errors import BackendError, ConfigError

logger = logging.getLogger(__name__)

ROLES = ("slow", "fast", "critic", "planner")
_ROLE_TAG = re.compile(r"\[role:(\w+)\]")

Messages = List[Dict[str, str]]


def role_of(messages: Messages) -> str:
    """Role named by the tag at the top of the system message."""
    for msg in messages:
        if msg.get("role") == "system":
            m = _ROLE_TAG.search(msg.get("content", ""))
            if m:
                return m.group(1)
    raise BackendError("prompt carries no role tag")


class ChatBackend:
    name = "base"

    def complete(self, messages: Messages) -> str:
        raise NotImplementedError

    def state_dict(self) -> Dict[str, Any]:
        return {}

    def load_state_dict(self, state: Dict[str, Any]) -> None:
        pass


# --- Scripted replay ----------------------------------------------------------

@dataclass
class ScriptedRule:
    reply: Optional[str]
    when: Optional[str] = None
    times: Optional[int] = None  # None: unlimited
    error: Optional[str] = None
    used: int = 0

    def matches(self, text: str) -> bool:
        if self.times is not None and self.used >= self.times:
            return False
        return self.when is None or re.search(self.when, text) is not None


class ScriptedBackend(ChatBackend):
    """Replays fixture replies; the first unexhausted rule whose pattern matches wins.

    Fixture layout: {"roles": {"slow": [{"when": regex, "reply": text, "times": n}, ...], ...}}.
    A rule with "error" instead of "reply" simulates an outage for that call.
    """

    name = "scripted"

    def __init__(self, rules: Dict[str, List[ScriptedRule]], source: Optional[str] = None):
        self.rules = rules
        self.source = source
        self.calls: Dict[str, int] = {role: 0 for role in rules}

    @classmethod
    def from_dict(cls, raw: Dict[str, Any], source: Optional[str] = None) -> "ScriptedBackend":
        roles = raw.get("roles")
        if not isinstance(roles, dict):
            raise ConfigError(f"fixture {source or ''} needs a 'roles' object")
        rules: Dict[str, List[ScriptedRule]] = {}
        for role, entries in roles.items():
            if role not in ROLES:
                raise ConfigError(f"fixture role '{role}' is not one of {', '.join(ROLES)}")
            parsed = []
            for entry in entries:
                if "reply" not in entry and "error" not in entry:
                    raise ConfigError(f"fixture rule for '{role}' needs 'reply' or 'error'")
                parsed.append(ScriptedRule(
                    reply=entry.get("reply"),
                    when=entry.get("when"),
                    times=entry.get("times"),
                    error=entry.get("error"),
                ))
            rules[role] = parsed
        return cls(rules, source)

    @classmethod
    def from_file(cls, path) -> "ScriptedBackend":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except OSError as e:
            raise ConfigError(f"cannot read fixture {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"fixture {path} is not valid JSON: {e}") from e
        return cls.from_dict(raw, source=str(path))

    def complete(self, messages: Messages) -> str:
        role = role_of(messages)
        text = "\n".join(m.get("content", "") for m in messages)
        self.calls[role] = self.calls.get(role, 0) + 1
        for rule in self.rules.get(role, []):
            if rule.matches(text):
                rule.used += 1
                if rule.error:
                    logger.error("Scripted %s backend outage: %s", role, rule.error)
                    raise BackendError(f"scripted outage: {rule.error}")
                return rule.reply
        raise BackendError(f"no scripted reply left for role '{role}'")

    def state_dict(self) -> Dict[str, Any]:
        return {
            "calls": dict(self.calls),
            "used": {role: [r.used for r in rules] for role, rules in self.rules.items()},
            "outages": {
                role: {str(i): r.used for i, r in enumerate(rules) if r.error and r.used}
                for role, rules in self.rules.items()
            },
        }

    def load_state_dict(self, state: Dict[str, Any]) -> None:
        """Restore replay counters; outages that already fired stay spent."""
        self.calls = dict(state.get("calls", {}))
        for role, counts in state.get("used", {}).items():
            for rule, used in zip(self.rules.get(role, []), counts):
                rule.used = used
        for role, spent in state.get("outages", {}).items():
            rules = self.rules.get(role, [])
            for index, used in spent.items():
                i = int(index)
                if i < len(rules):
                    rules[i].used = max(rules[i].used, used)


# --- HTTP backends --------------------------------------------------------------

def _api_key(env_name: Optional[str]) -> str:
    if not env_name:
        raise ConfigError("HTTP backends need backend.api_key_env")
    key = os.getenv(env_name)
    if not key:
        raise ConfigError(f"environment variable {env_name} is not set")
    return key


class HttpBackend(ChatBackend):
    def __init__(self, cfg: BackendConfig, retries: int = HTTP_RETRIES, backoff: float = 1.0):
        self.cfg = cfg
        self.retries = retries
        self.backoff = backoff
        self.api_key = _api_key(cfg.api_key_env)

    def build_request(self, messages: Messages):
        raise NotImplementedError

    def parse_response(self, body: Dict[str, Any]) -> str:
        raise NotImplementedError

    def complete(self, messages: Messages) -> str:
        url, headers, payload = self.build_request(messages)
        last_error = "no attempt"
        for attempt in range(self.retries + 1):
            try:
                response = requests.post(url, json=payload, headers=headers, timeout=self.cfg.timeout)
                if response.status_code == 200:
                    return self.parse_response(response.json())
                last_error = f"HTTP {response.status_code}: {response.text[:200]}"
            except requests.RequestException as e:
                last_error = str(e)
            except (KeyError, IndexError, ValueError) as e:
                last_error = f"malformed response: {e}"
            logger.warning("%s backend attempt %s failed: %s", self.name, attempt + 1, last_error)
            if attempt < self.retries:
                time.sleep(self.backoff * (attempt + 1))
        logger.error("%s backend gave up after %s attempts: %s", self.name, self.retries + 1, last_error)
        raise BackendError(f"{self.name} backend unreachable: {last_error}")


class OpenAIBackend(HttpBackend):
    name = "openai"

    def build_request(self, messages: Messages):
        headers = {"Authorization": f"Bearer {self.api_key}", "Content-Type": "application/json"}
        payload = {"model": self.cfg.model, "messages": messages, "temperature": GENERATION_CONFIG["temperature"]}
        return self.cfg.endpoint, headers, payload

    def parse_response(self, body: Dict[str, Any]) -> str:
        return body["choices"][0]["message"]["content"]


class GeminiBackend(HttpBackend):
    name = "gemini"

    def build_request(self, messages: Messages):
        system = "\n\n".join(m["content"] for m in messages if m["role"] == "system")
        contents = [
            {"role": "model" if m["role"] == "assistant" else "user", "parts": [{"text": m["content"]}]}
            for m in messages
            if m["role"] != "system"
        ]
        payload = {
            "contents": contents,
            "systemInstruction": {"parts": [{"text": system}]},
            "generationConfig": GENERATION_CONFIG,
        }
        url = (
            f"https://generativelanguage.googleapis.com/v1beta/models/{self.cfg.model}"
            f":generateContent?key={self.api_key}"
        )
        return url, {"Content-Type": "application/json"}, payload

    def parse_response(self, body: Dict[str, Any]) -> str:
        return body["candidates"][0]["content"]["parts"][0]["text"]


def make_backend(cfg: BackendConfig) -> ChatBackend:
    if cfg.kind == "scripted":
        if not cfg.fixture:
            raise ConfigError("scripted backend needs backend.fixture")
        return ScriptedBackend.from_file(cfg.fixture)
    if cfg.kind == "openai":
        return OpenAIBackend(cfg)
    if cfg.kind == "gemini":
        if not cfg.model.startswith("gemini"):
            cfg = dataclasses.replace(cfg, model=DEFAULT_GEMINI_MODEL)
        return GeminiBackend(cfg)
    raise ConfigError(f"unknown backend kind '{cfg.kind}'")
