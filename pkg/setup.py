from setuptools import find_packages, setup

try:
    with open("README.md") as f:
        long_description = f.read()
except Exception:
    long_description = ""
    print("Failed to load README.md as long_description")

version = {}
with open("noise_adapt/_version.py") as f:
    exec(f.read(), version)

setup(
    name="noise-adapt",
    version=version["__version__"],
    packages=find_packages(exclude=["test"]),
    description="Simulate target-domain noisy speech with a noise-conditioned GAN and adapt speech enhancers to it",
    long_description=long_description,
    long_description_content_type="text/markdown",
    platforms=["Linux", "Mac OSX", "Windows"],
    license="BSD 3-Clause",
    python_requires=">=3.9",
    install_requires=[
        "requests",
        "pyyaml",
        "tqdm",
        "numpy",
        "torch",
        "soundfile",
        "scikit-learn",
        "matplotlib",
    ],
    extras_require={"metrics": ["pesq", "pystoi"]},
    entry_points={
        "console_scripts": [
            "noise-adapt = noise_adapt.cli:cli",
        ]
    },
)
