from doctest import ELLIPSIS, NORMALIZE_WHITESPACE

import pytest
from sybil import Sybil
from sybil.parsers.codeblock import PythonCodeBlockParser
from sybil.parsers.doctest import DocTestParser
from sybil.parsers.skip import skip


@pytest.fixture(scope="module")
def tmp_path(tmp_path_factory):
    # one directory per document, the examples share files across blocks
    return tmp_path_factory.mktemp("docs")


pytest_collect_file = Sybil(
    parsers=[
        DocTestParser(optionflags=ELLIPSIS | NORMALIZE_WHITESPACE),
        PythonCodeBlockParser(),
        skip,
    ],
    patterns=["pages/quick_start.rst"],
    fixtures=["tmp_path"],
).pytest()
