"""Collects one verdict line per acceptance criterion for the terminal summary."""

_RESULTS: dict = {}
_NOTES: list = []


def record(number: int, title: str, ok: bool, detail: str) -> None:
    _RESULTS[number] = f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {title}: {detail}"
    print(_RESULTS[number])


def note(text: str) -> None:
    _NOTES.append(text)


def lines() -> list:
    return [_RESULTS[k] for k in sorted(_RESULTS)] + _NOTES
