import json
from pathlib import Path

import pytest

from finkgqa.llm_client import ChatClient, LlmConfig, MockChatTransport
from finkgqa.preprocess import load_split

FIXTURES = Path(__file__).parent / "fixtures"
CORPUS = FIXTURES / "fin_sample.json"


@pytest.fixture(scope="session")
def corpus_path() -> Path:
    return CORPUS


@pytest.fixture(scope="session")
def corpus_docs():
    return load_split(CORPUS)


@pytest.fixture(scope="session")
def answer_key() -> dict:
    key = {}
    for record in json.loads(CORPUS.read_text(encoding="utf-8")):
        key[record["qa"]["question"]] = str(record["qa"]["answer"])
    return key


@pytest.fixture()
def mock_client(answer_key):
    transport = MockChatTransport(answer_key=answer_key)
    cfg = LlmConfig(model_name="mock-chat", endpoint="http://mock.invalid",
                    retry_backoff_s=0.0)
    return ChatClient(cfg, transport=transport)
