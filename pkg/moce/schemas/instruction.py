from pydantic import BaseModel, ConfigDict, Field
from typing import Optional


class InstructionRecord(BaseModel):
    model_config = ConfigDict(extra="ignore", str_strip_whitespace=True)

    id: str = Field(..., min_length=1)
    instruction: str = Field(..., min_length=1)
    response: str = Field(..., min_length=1)
    source: Optional[str] = Field(None, max_length=100)
