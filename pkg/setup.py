"""
Setup configuration for UniControl-Desk
Unified controllable diffusion at desk scale
"""

from setuptools import setup, find_packages

with open("README.md", "r", encoding="utf-8") as fh:
    long_description = fh.read()

setup(
    name="unicontrol-desk",
    version="0.1.0",
    author="UniControl-Desk Team",
    description="Unified multi-task controllable diffusion trained and sampled on a CPU",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=find_packages(exclude=["examples", "examples.*"]),
    package_data={
        "unicontrol_desk": ["assets/configs/*.cfg", "assets/golden/*.bin"],
    },
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "Intended Audience :: Education",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
        "Topic :: Scientific/Engineering :: Image Processing",
        "License :: OSI Approved :: MIT License",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Programming Language :: Python :: 3.12",
    ],
    python_requires=">=3.9",
    install_requires=[
        "numpy>=1.24.0",
        "scipy>=1.10.0",
        "scikit-image>=0.21.0",
        "tqdm>=4.65.0",
        "PyQt6>=6.6.0",
    ],
    extras_require={
        "dev": [
            "pytest>=7.4.0",
            "pytest-cov>=4.1.0",
            "black>=23.0.0",
            "flake8>=6.0.0",
            "mypy>=1.5.0",
            "pylint>=3.0.0",
        ],
    },
    entry_points={
        "console_scripts": [
            "unicontrol-desk=main:main",
        ],
    },
    py_modules=["main"],
)
