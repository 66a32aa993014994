from __future__ import annotations

import pytest

from uno.backends import build_mock_backends
from uno.types import RuleSet, RuleSource, Session, Turn


@pytest.fixture
def mocks():
    return build_mock_backends(seed=7, embed_dim=16)


@pytest.fixture
def sample_sessions() -> list[Session]:
    return [
        Session(
            id="s-001",
            query="Summarize the sprint planning meeting for the backend team.",
            initial_response="The meeting covered several topics.",
            trajectory=(
                Turn(
                    user_input="user: This is too vague, please always mention the term 'deadline'.",
                    model_response="Understood.",
                ),
            ),
        ),
        Session(
            id="s-002",
            query="Draft a release note for the mobile app update.",
            initial_response="The app was updated.",
            trajectory=(),
        ),
        Session(
            id="s-003",
            query="Explain the quarterly budget variance to the finance group.",
            initial_response="The budget changed.",
            trajectory=(
                Turn(user_input="user: Looks fine to me, thanks!", model_response="Glad to help."),
            ),
        ),
    ]


@pytest.fixture
def rules_distilled() -> RuleSet:
    return RuleSet(
        rules=("Always mention the term 'deadline'.", "Keep the summary under five sentences."),
        source=RuleSource.DISTILLED,
    )


def write_log_file(path: Path, records: list[dict]) -> Path:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    return path
