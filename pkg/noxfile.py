# Import built-in modules
import os

# Import third-party modules
import nox


SMOKE_OVERRIDES = [
    "--set",
    "model.d_model=16",
    "--set",
    "model.n_heads=2",
    "--set",
    "model.d_ffn=32",
    "--set",
    "max_steps=20",
    "--set",
    "unified_steps=10",
]


@nox.session
def lint(session):
    """Run linting checks."""
    session.install("ruff", "mypy", "isort")
    session.run("mypy", "--install-types", "--non-interactive")
    session.run("ruff", "check", ".")
    session.run("ruff", "format", "--check", ".")
    session.run("isort", "--check-only", ".")
    session.run("mypy", "src/dtnmt", "--strict")


@nox.session
def lint_fix(session):
    """Fix linting issues."""
    session.install("ruff", "mypy", "isort")
    session.run("ruff", "check", "--fix", ".")
    session.run("ruff", "format", ".")
    session.run("isort", ".")


@nox.session
def pytest(session):
    """Run the fast tests."""
    session.install("-e", ".[test]")
    session.run(
        "pytest",
        "tests/",
        "-m",
        "not slow",
        "--cov=dtnmt",
        "--cov-report=xml:coverage.xml",
        "--cov-report=term-missing",
        *session.posargs,
    )


@nox.session
def pytest_slow(session):
    """Run every test, including the training oracles that need a few minutes of CPU."""
    session.install("-e", ".[test]")
    session.run("pytest", "tests/", *session.posargs)


@nox.session
def smoke(session):
    """Run the whole pipeline once on a small synthetic task."""
    session.install("-e", ".")
    work = os.path.join(session.create_tmp(), "smoke")
    data = os.path.join(work, "data")
    base = os.path.join(work, "base")
    unified = os.path.join(work, "unified")
    session.run("dtnmt", "gen-data", "--out", data, "--set", "data.sizes=[200, 200, 100, 100]", "--seed", "1")
    session.run("dtnmt", "train-baseline", "--data", data, "--out", base, *SMOKE_OVERRIDES)
    ckpt = os.path.join(base, "baseline.ckpt")
    session.run("dtnmt", "train-unified", "--data", data, "--base", ckpt, "--out", unified, *SMOKE_OVERRIDES)
    session.run(
        "dtnmt",
        "evaluate",
        "--data",
        data,
        "--ckpt",
        os.path.join(unified, "unified.ckpt"),
        "--reference",
        ckpt,
        "--out",
        os.path.join(work, "eval"),
    )
    session.log(f"Smoke run written to {work}")


@nox.session
def docs(session):
    """Build documentation."""
    session.install("-e", ".[docs]")
    session.chdir("docs")
    session.run("make", "html", external=True)


@nox.session
def docs_serve(session):
    """Build and serve documentation with live reloading."""
    session.install("-e", ".[docs]")
    session.install("sphinx-autobuild")
    session.run("sphinx-autobuild", "docs", "docs/_build/html", "--open-browser")
