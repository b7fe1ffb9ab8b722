#!/usr/bin/env python3
"""
Setup script for the robust super-replication pricing engine

Usage: python setup.py [--dev]
"""
import os
import shutil
import subprocess
import sys

MIN_PYTHON = (3, 9)
VENV_DIR = 'venv'


def run_step(args, description):
    """Run one setup command; print its output on failure"""
    print(f"🔄 {description}...")
    result = subprocess.run(args, capture_output=True, text=True)
    if result.returncode != 0:
        print(f"❌ {description} failed (exit {result.returncode})")
        for stream in (result.stdout, result.stderr):
            if stream:
                print(stream.strip())
        return False
    print(f"✅ {description} done")
    return True


def venv_executable(name):
    folder = 'Scripts' if os.name == 'nt' else 'bin'
    return os.path.join(VENV_DIR, folder, name)


def prepare_env_file():
    if os.path.exists('.env'):
        print("✅ .env present")
    elif os.path.exists('.env.example'):
        shutil.copyfile('.env.example', '.env')
        print("📝 Wrote .env from .env.example (node budget, threads, grid step)")
    else:
        print("⚠️  No .env.example found; built-in defaults apply")


def main():
    """Create the venv, install requirements, seed .env and output/"""
    print("📈 Super-Replication Engine Setup")
    print("=" * 50)

    if sys.version_info < MIN_PYTHON:
        print(f"❌ Python {MIN_PYTHON[0]}.{MIN_PYTHON[1]}+ is required")
        return 1
    print(f"✅ Python {sys.version_info.major}.{sys.version_info.minor}")

    if os.path.isdir(VENV_DIR):
        print(f"✅ {VENV_DIR}/ present")
    elif not run_step([sys.executable, '-m', 'venv', VENV_DIR], 'Creating virtual environment'):
        return 1

    requirements = 'requirements-dev.txt' if '--dev' in sys.argv[1:] else 'requirements.txt'
    if not run_step([venv_executable('pip'), 'install', '-r', requirements], f"Installing {requirements}"):
        return 1

    prepare_env_file()
    os.makedirs('output', exist_ok=True)

    print("\n🎉 Setup completed successfully!")
    print("\n📋 Next steps:")
    print("1. Run the tests: pytest (after `python setup.py --dev`)")
    print("2. Price the binomial example: python run_engine.py --config configs/price_binomial_call.json")
    print("3. Try the other modes in configs/")
    print("\n📖 See README.md for detailed instructions")
    return 0


if __name__ == '__main__':
    # Build frontends (pip) invoke this file with a setuptools command;
    # packaging metadata lives in pyproject.toml
    if len(sys.argv) > 1 and not sys.argv[1].startswith('-'):
        from setuptools import setup
        setup()
    else:
        sys.exit(main())
