import setuptools
from setuptools import setup

install_deps = [
    'numpy>=1.20.0',
    'scipy',
    'natsort',
    'tqdm',
    'torch>=1.6',
    'opencv-python-headless',
]

test_deps = [
    'pytest',
    'pytest-cov',
]

try:
    import torch
    a = torch.ones(2, 3)
    from importlib.metadata import version
    ver = version("torch")
    major_version, minor_version, _ = ver.split(".")
    if major_version == "2" or int(minor_version) >= 6:
        install_deps.remove("torch>=1.6")
except:
    pass

with open("README.md", "r") as fh:
    long_description = fh.read()

setup(
    name="sslseg", license="BSD",
    description="self-supervised pretraining for label-efficient segmentation",
    long_description=long_description, long_description_content_type="text/markdown",
    setup_requires=[
        'pytest-runner',
        'setuptools_scm',
    ], packages=setuptools.find_packages(include=["sslseg", "sslseg.*"]),
    use_scm_version=True, install_requires=install_deps, tests_require=test_deps,
    extras_require={
        'test': test_deps,
    }, include_package_data=True, classifiers=(
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: BSD License",
        "Operating System :: OS Independent",
    ), entry_points={'console_scripts': ['sslseg = sslseg.__main__:main']})
