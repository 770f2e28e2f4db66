import pathlib

import pytest

from toolloop.catalog import ApiIdentifier, load_universe_file
from toolloop.llm import ScriptedBackend

DATA = pathlib.Path(__file__).parent / "data"


def data_path(name: str) -> str:
    return str(DATA / name)


def scenario(name: str) -> ScriptedBackend:
    return ScriptedBackend.from_file(data_path(name))


@pytest.fixture
def universe():
    return load_universe_file(data_path("universe_basic.json"))


@pytest.fixture
def stairs_universe():
    return load_universe_file(data_path("universe_stairs.json"))


@pytest.fixture
def echo_universe():
    return load_universe_file(data_path("universe_echo.json"))


def api(category: str, tool: str, name: str) -> ApiIdentifier:
    return ApiIdentifier(category, tool, name)


CONVERT = api("Finance", "CurrencyX", "convert")
LIST_SYMBOLS = api("Finance", "CurrencyX", "list_symbols")
QUOTE = api("Finance", "StockY", "quote")
HISTORY = api("Finance", "StockY", "history")
DIVIDENDS = api("Finance", "StockY", "dividends")
