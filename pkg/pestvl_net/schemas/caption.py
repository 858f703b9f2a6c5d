"""
Pydantic schemas for expert knowledge, CoT templates and caption records.
"""

from typing import List

from pydantic import BaseModel, ConfigDict, Field, field_validator


class Attribute(BaseModel):
    """One descriptive facet of a species (color, markings, texture, ...)."""

    facet: str = Field(..., min_length=1)
    description: str = Field(..., min_length=1)


class ExpertKnowledgeEntry(BaseModel):
    """Expert description of one pest species."""

    species_name: str = Field(..., min_length=1, description="Species or class name")
    attributes: List[Attribute] = Field(..., min_length=1)

    @field_validator("species_name")
    @classmethod
    def validate_species_name(cls, v: str) -> str:
        if not v.strip():
            raise ValueError("species_name must not be blank")
        return v


class CotTemplate(BaseModel):
    """Ordered chain-of-thought steps with {species}, {attributes} and {image_context} placeholders."""

    version: str = Field(..., min_length=1)
    steps: List[str] = Field(..., min_length=1)


class CaptionRecord(BaseModel):
    """One generated caption, serialized with camelCase keys."""

    model_config = ConfigDict(populate_by_name=True, extra="forbid", protected_namespaces=())

    image_id: str = Field(..., alias="imageId", min_length=1)
    species_label: str = Field(..., alias="speciesLabel")
    caption: str = Field(..., min_length=1)
    prompt_hash: str = Field(..., alias="promptHash", pattern=r"^[0-9a-f]{64}$")
    model_id: str = Field(..., alias="modelId")
    timestamp: int = Field(..., ge=0, description="UTC seconds")

    @field_validator("caption")
    @classmethod
    def validate_caption(cls, v: str) -> str:
        if not v.strip():
            raise ValueError("caption must not be blank")
        return v
