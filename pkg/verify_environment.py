#!/usr/bin/env python3
"""
Compares the active interpreter against requirements-lock.txt and checks
the float64 autograd path used for generator Hessians.
"""

import importlib
import os
import sys

HERE = os.path.dirname(os.path.abspath(__file__))
PYTHON_PIN = "3.9.18"
CONDA_ENV = "ssdc"


def read_pins(path=os.path.join(HERE, "requirements-lock.txt")):
    pins = {}
    with open(path) as f:
        for line in f:
            line = line.split("#")[0].strip()
            if "==" in line:
                name, version = line.split("==", 1)
                pins[name.strip()] = version.strip()
    return pins


def report(ok, label, detail):
    print(f"{'✅' if ok else '❌'} {label}: {detail}")
    return ok


def installed_version(name):
    try:
        module = importlib.import_module(name)
    except ImportError as e:
        return None, str(e)
    # torch wheels carry a build suffix, e.g. 2.1.2+cpu
    return str(getattr(module, "__version__", "unknown")).split("+")[0], None


def hessian_check():
    """d2/dx2 of x1^2 x2 at (1.5, 2) must be [[4, 3], [3, 0]] in float64"""
    try:
        import torch

        x = torch.tensor([1.5, 2.0], dtype=torch.float64)
        hessian = torch.autograd.functional.hessian(lambda z: z[0] ** 2 * z[1], x)
        expected = torch.tensor([[4.0, 3.0], [3.0, 0.0]], dtype=torch.float64)
        return hessian.dtype == torch.float64 and bool(torch.allclose(hessian, expected, atol=1e-12)), "hessian"
    except Exception as e:
        return False, f"{type(e).__name__}: {e}"


def main():
    print(f"checking environment against {os.path.join(HERE, 'requirements-lock.txt')}\n")
    python = ".".join(map(str, sys.version_info[:3]))
    results = [
        report(python == PYTHON_PIN, "python", f"{python} (pinned {PYTHON_PIN})"),
        report(os.environ.get("CONDA_DEFAULT_ENV") == CONDA_ENV, "conda env",
               os.environ.get("CONDA_DEFAULT_ENV", "none active")),
    ]
    for name, pinned in read_pins().items():
        version, error = installed_version(name)
        if error:
            results.append(report(False, name, f"not importable ({error})"))
        else:
            results.append(report(version == pinned, name, f"{version} (pinned {pinned})"))
    ok, detail = hessian_check()
    results.append(report(ok, "float64 second derivatives", detail))

    if all(results):
        print("\nenvironment matches the lock files")
        sys.exit(0)
    print(f"\n{results.count(False)} check(s) failed; rebuild with:")
    print(f"  conda remove -n {CONDA_ENV} --all")
    print("  conda env create -f environment-locked.yml")
    print("  pip install -e .")
    sys.exit(1)


if __name__ == "__main__":
    main()
