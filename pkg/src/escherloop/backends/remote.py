"""Chat-completion backend: operator payloads are prompt templates."""

from __future__ import annotations

import logging
import os
import re
import string
from typing import Optional

import httpx
import numpy as np

from ..population import Kind
from . import BackendConfig, BackendConfigError, EndpointProfile, GenerationError, GenerationRequest, GenerationResult

log = logging.getLogger(__name__)

_FENCE = re.compile(r"```[a-zA-Z0-9_+-]*\n(.*?)```", re.DOTALL)


def format_parents(parents: list[tuple[str, float]], kind: Kind) -> str:
    label = "Program" if kind is Kind.TASK else "Optimizer"
    blocks = []
    for i, (payload, score) in enumerate(parents, 1):
        metric = "score" if kind is Kind.TASK else "elo"
        blocks.append(f"### {label} {i} ({metric}: {score:.6f})\n```\n{payload}\n```")
    return "\n\n".join(blocks)


def render_prompt(template: str, req: GenerationRequest) -> str:
    """Substitute ``$parents``, ``$n_parents`` and ``$target`` into the template."""
    if "$parents" not in template and "${parents}" not in template:
        raise GenerationError("operator template has no $parents placeholder", operator_fault=True)
    return string.Template(template).safe_substitute(
        parents=format_parents(req.parents, req.target_kind),
        n_parents=str(len(req.parents)),
        target=req.target_kind.value,
    )


def extract_payload(text: str) -> str:
    """Take the last fenced block if the reply has one, else the raw reply."""
    blocks = _FENCE.findall(text)
    return (blocks[-1] if blocks else text).strip()


def choose_profile(profiles: list[EndpointProfile], rng: np.random.Generator) -> EndpointProfile:
    w = np.asarray([p.weight for p in profiles], dtype=float)
    return profiles[int(rng.choice(len(profiles), p=w / w.sum()))]


class RemoteChatBackend:
    label = "remote"

    def __init__(self, cfg: BackendConfig, client: Optional[httpx.Client] = None):
        self.cfg = cfg
        self.api_key = os.environ.get(cfg.api_key_env, "")
        self.client = client or httpx.Client()

    def check_credentials(self) -> None:
        if not self.api_key:
            raise BackendConfigError(f"environment variable {self.cfg.api_key_env} is not set")

    def _post(self, profile: EndpointProfile, prompt: str, req: GenerationRequest) -> dict:
        body = {
            "model": profile.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
            **profile.options,
        }
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        url = profile.base_url.rstrip("/") + "/chat/completions"
        resp = self.client.post(url, json=body, headers=headers, timeout=req.timeout)
        resp.raise_for_status()
        return resp.json()

    def generate(self, req: GenerationRequest, rng: np.random.Generator) -> GenerationResult:
        prompt = render_prompt(req.operator.payload, req)
        profile = choose_profile(self.cfg.profiles, rng)
        spent_in = spent_out = 0
        last_error = "no attempt made"
        for attempt in range(req.retries + 1):
            try:
                data = self._post(profile, prompt, req)
            except (httpx.HTTPError, ValueError) as exc:
                last_error = f"{type(exc).__name__}: {exc}"
                log.warning("request to %s failed (attempt %d): %s", profile.name, attempt + 1, last_error)
                continue
            usage = data.get("usage") or {}
            spent_in += int(usage.get("prompt_tokens", 0))
            spent_out += int(usage.get("completion_tokens", 0))
            try:
                text = data["choices"][0]["message"]["content"] or ""
            except (KeyError, IndexError, TypeError):
                text = ""
            payload = extract_payload(text)
            if payload:
                return GenerationResult(payload, spent_in, spent_out, f"remote:{profile.name}")
            last_error = "empty completion"
        raise GenerationError(f"retries exhausted: {last_error}", tokens_in=spent_in, tokens_out=spent_out)
