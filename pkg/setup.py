#!/usr/bin/env python3
"""
Compatibility shim for tools that still call ``setup.py``.

Metadata lives in ``pyproject.toml``; this only derives the version from the
package and the install tiers from the pinned requirement files.
"""

import re
from pathlib import Path

from setuptools import find_packages, setup

HERE = Path(__file__).resolve().parent


def package_version() -> str:
    init = (HERE / "src" / "feeder_microgrid" / "__init__.py").read_text(encoding="utf-8")
    match = re.search(r"^__version__ = ['\"]([^'\"]+)['\"]", init, re.M)
    if match is None:
        raise RuntimeError("feeder_microgrid.__version__ not found")
    return match.group(1)


def pinned(name: str) -> list:
    lines = (HERE / name).read_text(encoding="utf-8").splitlines()
    return [ln.strip() for ln in lines if ln.strip() and not ln.lstrip().startswith(("#", "-r"))]


setup(
    name="feeder-microgrid",
    version=package_version(),
    packages=find_packages("src"),
    package_dir={"": "src"},
    package_data={"feeder_microgrid": ["config/*.yaml"]},
    python_requires=">=3.10",
    install_requires=pinned("requirements-prod.txt"),
    extras_require={"dev": pinned("requirements-dev.txt")},
    entry_points={"console_scripts": ["feeder-mg=feeder_microgrid.harness.cli:main"]},
    zip_safe=False,
)
