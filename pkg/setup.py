from setuptools import setup, find_packages
import os

def read_readme():
    """Read the README, falling back to a one-line description"""
    try:
        with open("README.md", encoding="utf-8") as f:
            return f.read()
    except (FileNotFoundError, UnicodeDecodeError):
        return "Neuro-genetic inverse kinematics for serial revolute chains"

setup(
    name="ik_optimizer",
    version="0.1.0",
    packages=find_packages(exclude=["tests", "tests.*"]),
    package_data={"ik_optimizer": ["data/chains/*.json"]},
    install_requires=[
        "numpy>=1.22.0",
        "pandas>=1.4.0",
        "scipy>=1.8.0",
        "scikit-learn>=1.0.0",
        "joblib>=1.1.0",
        "tqdm>=4.60.0",
    ],
    entry_points={"console_scripts": ["ik-optimizer=ik_optimizer.cli:main"]},
    python_requires=">=3.8",
    author="huziqi",
    author_email="ziqihu@outlook.com",
    description="Neuro-genetic inverse kinematics for serial revolute chains",
    long_description=read_readme(),
    long_description_content_type="text/markdown",
)
