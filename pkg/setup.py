from setuptools import setup
from enum import Enum

with open("src/qdavpr/__init__.py", "r") as file:
    for line in file:
        if "__version__" in line:
            version = line.split('"')[1]
        if "__author__" in line:
            author = line.split('"')[1]

with open("README.md", encoding="utf-8") as f:
    LONG_DESCRIPTION = f.read()


class Dependency(str, Enum):
    TORCH = "torch>=2.0"
    NUMPY = "numpy>=1.23"
    SCIPY = "scipy>=1.9"
    SCIKIT_LEARN = "scikit-learn>=1.1"
    PILLOW = "Pillow>=9.1"
    TQDM = "tqdm>=4.64"
    TYPING_EXTENSIONS = "typing-extensions>=4.4.0"
    PYYAML = "PyYAML>=6.0"
    NUMPYDOC = "numpydoc==1.5.0"
    SPHINX = "Sphinx==5.2.3"
    M2R2 = "m2r2==0.3.3"
    DOCUTILS = "docutils==0.19"
    FURO = "furo==2022.9.29"
    PYTEST = "pytest>=7.1.3"
    PYTEST_COV = "pytest-cov>=4.0.0"
    COVERAGE = "coverage>=6.5.0"
    DEEPDIFF = "deepdiff>=6.2.1"
    SYBIL = "sybil>=3.0.1"
    MYPY = "mypy>=0.981"
    BANDIT = "bandit==1.7.4"
    PYLINT = "pylint==2.14.5"
    PYDOCSTYLE = "pydocstyle==6.1.1"
    TYPES_PYYAML = "types-PyYAML>=6.0.12"
    TYPES_TQDM = "types-tqdm>=4.64"
    MYPY_EXTENSIONS = "mypy-extensions==0.4.3"


Dep = Dependency

REQ_CORE = {
    Dep.TORCH,
    Dep.NUMPY,
    Dep.SCIPY,
    Dep.SCIKIT_LEARN,
    Dep.PILLOW,
    Dep.TQDM,
    Dep.TYPING_EXTENSIONS,
}
REQ_YAML = {Dep.PYYAML}
REQ_ALL = REQ_YAML

REQ_LINT = REQ_ALL | {
    Dep.MYPY,
    Dep.BANDIT,
    Dep.PYLINT,
    Dep.PYDOCSTYLE,
    Dep.NUMPYDOC,
    Dep.TYPES_PYYAML,
    Dep.TYPES_TQDM,
    Dep.MYPY_EXTENSIONS,
}
REQ_DOC = REQ_ALL | {Dep.SPHINX, Dep.M2R2, Dep.DOCUTILS, Dep.FURO, Dep.NUMPYDOC}
REQ_TEST = REQ_LINT | {
    Dep.PYTEST,
    Dep.PYTEST_COV,
    Dep.COVERAGE,
    Dep.DEEPDIFF,
    Dep.SYBIL,
}
REQ_DEV = REQ_DOC | REQ_TEST

req_to_str_list = lambda req: sorted(entry.value for entry in req)

EXTRAS_REQUIRE = {
    "yaml": req_to_str_list(REQ_YAML),
    "all": req_to_str_list(REQ_ALL),
    "lint": req_to_str_list(REQ_LINT),
    "doc": req_to_str_list(REQ_DOC),
    "test": req_to_str_list(REQ_TEST),
    "dev": req_to_str_list(REQ_DEV),
}

setup(
    name="QdaVPR",
    version=version,
    author=author,
    license="LGPLv3",
    description="Query-based domain-agnostic visual place recognition.",
    long_description=LONG_DESCRIPTION,
    long_description_content_type="text/markdown",
    keywords="visual place recognition image retrieval domain adversarial bag of queries",
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: GNU Lesser General Public License v3 (LGPLv3)",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: Implementation :: CPython",
        "Topic :: Scientific/Engineering :: Image Recognition",
        "Operating System :: OS Independent",
        "Typing :: Typed",
    ],
    python_requires=">=3.10",
    install_requires=req_to_str_list(REQ_CORE),
    extras_require=EXTRAS_REQUIRE,
    packages=["qdavpr", "qdavpr.data", "qdavpr.serial"],
    package_dir={"": "src"},
    package_data={"qdavpr": ["py.typed"]},
    entry_points={"console_scripts": ["qdavpr=qdavpr.cli:main"]},
)
