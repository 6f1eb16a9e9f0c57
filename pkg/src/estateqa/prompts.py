"""Versioned text assets: system prompts, few-shot example blocks, tool
descriptions. Loaded from the package's ``assets/`` directory."""

from __future__ import annotations

from importlib import resources


def load_prompt(name: str) -> str:
    return (
        resources.files("estateqa").joinpath("assets", f"{name}.txt").read_text("utf-8")
    )
