"""
Caption generation service: prompt rendering, the MLLM client and the caption store.
"""

import asyncio
import base64
import hashlib
import json
import logging
import string
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional

import httpx
from pydantic import ValidationError as PydanticValidationError

from ..config import Settings, get_settings
from ..schemas.caption import CaptionRecord, CotTemplate, ExpertKnowledgeEntry
from ..utils.exceptions import (
    CaptionStoreError,
    ConfigError,
    DataError,
    MllmAuthError,
    MllmResponseError,
    MllmTimeoutError,
    PestVLError,
    PromptTemplateError,
    TransientServiceError,
)
from ..utils.logging_config import log_performance
from ..utils.retry import RetriesExhausted, RetryConfig, gather_bounded, retry_async

logger = logging.getLogger(__name__)

PLACEHOLDERS = ("species", "attributes", "image_context")
PLAIN_PROMPT = "Describe the pest in this image: its color, markings, texture and body shape."
_MIME_TYPES = {".png": "image/png", ".jpg": "image/jpeg", ".jpeg": "image/jpeg"}


def load_expert_knowledge(path: str | Path) -> Dict[str, ExpertKnowledgeEntry]:
    """Read a JSON list of expert-knowledge entries keyed by species name."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        entries = [ExpertKnowledgeEntry.model_validate(item) for item in raw]
    except FileNotFoundError:
        raise DataError(f"Expert knowledge file {path} not found")
    except (json.JSONDecodeError, PydanticValidationError, TypeError) as e:
        raise DataError(f"Expert knowledge file {path} is invalid: {e}")
    return {entry.species_name: entry for entry in entries}


def load_cot_template(path: str | Path) -> CotTemplate:
    try:
        return CotTemplate.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"CoT template file {path} not found")
    except PydanticValidationError as e:
        raise DataError(f"CoT template file {path} is invalid: {e}")


def format_attributes(entry: ExpertKnowledgeEntry) -> str:
    return "\n".join(f"- {a.facet}: {a.description}" for a in entry.attributes)


def _render(step: str, binding: Dict[str, str]) -> str:
    for _, field_name, _, _ in string.Formatter().parse(step):
        if field_name is None:
            continue
        base = field_name.split(".")[0].split("[")[0]
        if base not in binding:
            raise PromptTemplateError(field_name)
    return step.format_map(binding)


def build_prompt(entry: ExpertKnowledgeEntry, template: CotTemplate, image_context: str = "") -> str:
    """
    Render the CoT steps, in order, one per line.

    Raises:
        PromptTemplateError: A step references a placeholder that is not bound
    """
    binding = {
        "species": entry.species_name,
        "attributes": format_attributes(entry),
        "image_context": image_context,
    }
    return "\n".join(_render(step, binding) for step in template.steps)


def build_plain_prompt(image_context: str = "") -> str:
    """Prompt without expert knowledge or reasoning steps."""
    if not image_context:
        return PLAIN_PROMPT
    return f"{PLAIN_PROMPT}\nContext: {image_context}"


def prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


# Caption store (JSON Lines)


def _record_line(record: CaptionRecord) -> str:
    return record.model_dump_json(by_alias=True) + "\n"


def write_caption_store(path: str | Path, records: Iterable[CaptionRecord]) -> None:
    """Overwrite ``path`` with one JSON record per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for record in records:
            f.write(_record_line(record))


def append_caption_record(path: str | Path, record: CaptionRecord) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8", newline="\n") as f:
        f.write(_record_line(record))


def read_caption_store(path: str | Path) -> List[CaptionRecord]:
    """
    Read every record of a caption store.

    Raises:
        CaptionStoreError: A line is not a valid record; cites its 1-based number
    """
    records: List[CaptionRecord] = []
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except FileNotFoundError:
        raise DataError(f"Caption store {path} not found")
    for number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            records.append(CaptionRecord.model_validate_json(line))
        except PydanticValidationError as e:
            raise CaptionStoreError(str(path), number, e.errors()[0]["msg"])
    return records


# MLLM client


def _image_data_url(image_path: Path) -> str:
    mime = _MIME_TYPES.get(image_path.suffix.lower())
    if mime is None:
        raise DataError(f"Unsupported image type for captioning: {image_path.name}")
    try:
        payload = base64.b64encode(image_path.read_bytes()).decode("ascii")
    except OSError as e:
        raise DataError(f"Cannot read image {image_path}: {e}")
    return f"data:{mime};base64,{payload}"


class MllmClient:
    """Async client for an OpenAI-compatible chat-completions endpoint."""

    def __init__(
        self,
        settings: Optional[Settings] = None,
        retry_config: Optional[RetryConfig] = None,
        transport: Optional[httpx.AsyncBaseTransport] = None,
    ):
        self.settings = settings or get_settings()
        if not self.settings.mllm_api_url or not self.settings.mllm_api_key:
            raise ConfigError(
                "MLLM_API_URL and MLLM_API_KEY must be set for caption generation",
                key="mllm_api_url",
            )
        self.model_id = self.settings.mllm_model_id
        self.retry_config = retry_config or RetryConfig(
            max_attempts=self.settings.mllm_max_attempts,
            base_delay=self.settings.mllm_base_delay,
            max_delay=self.settings.mllm_max_delay,
        )
        self._client = httpx.AsyncClient(
            timeout=self.settings.mllm_timeout_seconds,
            transport=transport,
            headers={"Authorization": f"Bearer {self.settings.mllm_api_key}"},
        )

    async def __aenter__(self) -> "MllmClient":
        return self

    async def __aexit__(self, *exc_info: Any) -> None:
        await self.aclose()

    async def aclose(self) -> None:
        await self._client.aclose()

    def _payload(self, prompt: str, data_url: str) -> Dict[str, Any]:
        return {
            "model": self.model_id,
            "messages": [
                {
                    "role": "user",
                    "content": [
                        {"type": "text", "text": prompt},
                        {"type": "image_url", "image_url": {"url": data_url}},
                    ],
                }
            ],
        }

    async def _post_once(self, payload: Dict[str, Any]) -> str:
        try:
            response = await self._client.post(str(self.settings.mllm_api_url), json=payload)
        except (httpx.TimeoutException, httpx.TransportError) as e:
            raise TransientServiceError("mllm", f"request failed: {e}")

        if response.status_code in (401, 403):
            raise MllmAuthError(response.status_code)
        if response.status_code == 429 or response.status_code >= 500:
            raise TransientServiceError(
                "mllm", f"HTTP {response.status_code}", status_code=response.status_code
            )
        if response.status_code >= 400:
            raise MllmResponseError(f"HTTP {response.status_code}", status_code=response.status_code)

        try:
            content = response.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise MllmResponseError(f"unexpected body ({type(e).__name__})")
        if not isinstance(content, str) or not content.strip():
            raise MllmResponseError("empty caption")
        return content.strip()

    async def complete(self, prompt: str, image_path: str | Path) -> str:
        """
        Caption one image.

        Raises:
            MllmAuthError: Credentials rejected (not retried)
            MllmTimeoutError: Every attempt failed transiently
            MllmResponseError: Unparseable or empty body (not retried)
        """
        payload = self._payload(prompt, _image_data_url(Path(image_path)))
        try:
            return await retry_async(
                lambda: self._post_once(payload),
                self.retry_config,
                retryable_exceptions=(TransientServiceError,),
                non_retryable_exceptions=(MllmAuthError, MllmResponseError),
                operation_name=f"caption {Path(image_path).name}",
            )
        except RetriesExhausted as e:
            raise MllmTimeoutError(e.attempts, str(e.last_exception))


async def generate_caption(
    image_path: str | Path,
    prompt: str,
    client: MllmClient,
    species_label: str,
    image_id: Optional[str] = None,
    clock: Callable[[], float] = time.time,
) -> CaptionRecord:
    """Submit image + prompt and wrap the caption in a CaptionRecord."""
    started = time.perf_counter()
    caption = await client.complete(prompt, image_path)
    record = CaptionRecord(
        image_id=image_id or Path(image_path).name,
        species_label=species_label,
        caption=caption,
        prompt_hash=prompt_hash(prompt),
        model_id=client.model_id,
        timestamp=int(clock()),
    )
    log_performance("generate_caption", time.perf_counter() - started, image_id=record.image_id)
    return record


@dataclass
class CaptionJob:
    image_path: str
    image_id: str
    species: str


@dataclass
class CaptionBatchResult:
    records: List[CaptionRecord] = field(default_factory=list)
    failures: List[Dict[str, Any]] = field(default_factory=list)


class CaptionService:
    """Batch driver: bounded concurrent captioning with a single-writer store."""

    def __init__(
        self,
        client: MllmClient,
        knowledge: Dict[str, ExpertKnowledgeEntry],
        template: Optional[CotTemplate],
        store_path: str | Path,
        max_concurrent: int = 4,
        plain: bool = False,
    ):
        self.client = client
        self.knowledge = knowledge
        self.template = template
        self.store_path = Path(store_path)
        self.max_concurrent = max_concurrent
        self.plain = plain
        self._store_lock = asyncio.Lock()

    def prompt_for(self, species: str, image_context: str = "") -> str:
        if self.plain:
            return build_plain_prompt(image_context)
        entry = self.knowledge.get(species)
        if entry is None:
            raise DataError(f"No expert knowledge entry for species '{species}'")
        if self.template is None:
            raise ConfigError("A CoT template is required unless plain prompts are used")
        return build_prompt(entry, self.template, image_context)

    async def _caption_and_store(self, jobs: List[CaptionJob]) -> List[CaptionRecord]:
        # jobs share one request; the caption is recorded for every image
        first = jobs[0]
        record = await generate_caption(
            first.image_path, self.prompt_for(first.species), self.client, first.species, first.image_id
        )
        records = [record.model_copy(update={"image_id": job.image_id}) for job in jobs]
        async with self._store_lock:
            for item in records:
                append_caption_record(self.store_path, item)
        return records

    async def run(self, jobs: List[CaptionJob], mode: str = "per_image") -> CaptionBatchResult:
        """
        Caption every job; failures are collected and the batch continues.

        Args:
            jobs: Images to caption
            mode: ``per_image`` or ``per_class`` (one request per species)

        Returns:
            CaptionBatchResult with stored records and per-request failures
        """
        if mode == "per_class":
            grouped: Dict[str, List[CaptionJob]] = {}
            for job in jobs:
                grouped.setdefault(job.species, []).append(job)
            groups = list(grouped.values())
        else:
            groups = [[job] for job in jobs]

        outcomes = await gather_bounded(
            [lambda g=g: self._caption_and_store(g) for g in groups], self.max_concurrent
        )
        result = CaptionBatchResult()
        for outcome in outcomes:
            group = groups[outcome["index"]]
            if outcome["success"]:
                result.records.extend(outcome["result"])
                continue
            error = outcome["error"]
            code = error.error_code.value if isinstance(error, PestVLError) else "INTERNAL_ERROR"
            logger.error(f"Captioning failed for {group[0].image_id}: {error}")
            result.failures.extend(
                {"image_id": job.image_id, "error_code": code, "message": str(error)} for job in group
            )
        logger.info(
            f"Captioned {len(result.records)} images, {len(result.failures)} failures",
            extra={"captioned": len(result.records), "failed": len(result.failures)},
        )
        return result
