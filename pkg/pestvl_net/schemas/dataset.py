"""
Pydantic schemas for dataset manifests.
"""

from typing import Dict, List, Optional

from pydantic import BaseModel, Field, model_validator

SPLIT_NAMES = ("train", "val", "test")


class Sample(BaseModel):
    """One image of the class-per-directory tree."""

    image_path: str = Field(..., description="Path relative to the manifest root")
    class_id: int = Field(..., ge=0)
    caption_hash: Optional[str] = Field(None, description="sha256 hex of the image's caption")


class DatasetManifest(BaseModel):
    """Samples of a dataset and their stratified train/val/test split."""

    root: str
    class_names: List[str] = Field(..., min_length=1)
    samples: List[Sample]
    splits: Dict[str, List[int]]
    seed: int = 0
    ratio: List[int] = Field(default_factory=lambda: [7, 1, 2])

    @model_validator(mode="after")
    def validate_splits(self) -> "DatasetManifest":
        if set(self.splits) != set(SPLIT_NAMES):
            raise ValueError(f"splits must be exactly {SPLIT_NAMES}")
        seen: set[int] = set()
        for name in SPLIT_NAMES:
            for index in self.splits[name]:
                if not 0 <= index < len(self.samples):
                    raise ValueError(f"split '{name}' references missing sample {index}")
                if index in seen:
                    raise ValueError(f"sample {index} appears in more than one split")
                seen.add(index)
        for sample in self.samples:
            if sample.class_id >= len(self.class_names):
                raise ValueError(f"class id {sample.class_id} out of range")
        return self

    @property
    def class_count(self) -> int:
        return len(self.class_names)

    def split_samples(self, split: str) -> List[Sample]:
        if split not in self.splits:
            raise KeyError(split)
        return [self.samples[i] for i in self.splits[split]]
