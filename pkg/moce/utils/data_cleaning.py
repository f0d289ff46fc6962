from typing import Any, Dict


def clean_text(value: str) -> str:
    """Collapse runs of whitespace; case is preserved because the embedder is case-sensitive."""
    if not value:
        return value
    return " ".join(value.split())


def clean_source(source: str) -> str:
    if not source:
        return source
    return source.strip().lower()


def clean_record_data(data: Dict[str, Any]) -> Dict[str, Any]:
    """Clean all instruction record fields."""
    cleaned_data = data.copy()

    if "id" in cleaned_data and cleaned_data["id"] is not None:
        cleaned_data["id"] = str(cleaned_data["id"]).strip()

    if isinstance(cleaned_data.get("instruction"), str):
        cleaned_data["instruction"] = clean_text(cleaned_data["instruction"])

    if isinstance(cleaned_data.get("response"), str):
        cleaned_data["response"] = clean_text(cleaned_data["response"])

    if isinstance(cleaned_data.get("source"), str):
        cleaned_data["source"] = clean_source(cleaned_data["source"])

    return cleaned_data
