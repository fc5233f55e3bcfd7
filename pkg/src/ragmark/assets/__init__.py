"""Bundled text assets: stop words and prompt templates.

Every asset can be overridden by dropping a file with the same name into a
directory passed as ``overrides_dir`` (wired to the run config), so prompt
experiments never require editing the installed package.
"""

from functools import lru_cache
from importlib import resources
from pathlib import Path

_PKG = "ragmark.assets"
_default_overrides_dir: str | None = None


def set_prompt_overrides_dir(path: str | None) -> None:
    """Process-wide default override directory (set once from the run config)."""
    global _default_overrides_dir
    _default_overrides_dir = path


def _read_packaged(relpath: str) -> str:
    return resources.files(_PKG).joinpath(relpath).read_text(encoding="utf-8")


def load_prompt(name: str, overrides_dir: str | None = None) -> str:
    """Return the prompt template ``name`` (without the .txt suffix)."""
    filename = f"{name}.txt"
    for directory in (overrides_dir, _default_overrides_dir):
        if directory:
            candidate = Path(directory) / filename
            if candidate.is_file():
                return candidate.read_text(encoding="utf-8")
    return _read_packaged(f"prompts/{filename}")


@lru_cache(maxsize=1)
def load_stopwords() -> frozenset[str]:
    """Lowercased English stop-word set used by the lexical metrics."""
    words = _read_packaged("stopwords.txt").split()
    return frozenset(w.lower() for w in words)
