#!/usr/bin/env python
from setuptools import setup


with open("README.md", "r", encoding="utf-8") as fh:
    long_description = fh.read()


setup(
    name='motion_synth',
    version='0.1.0',
    description='Keyframe motion synthesis with language-model agents and physics-based tracking',
    packages=['motion_synth'],
    entry_points={
        'console_scripts': [
            'motion-synth = motion_synth.cli:main',
        ]
    },
    license='MIT',
    long_description=long_description,
    install_requires=[
        'numpy',
        'pandas',
        'scipy',
        'torch',
        'matplotlib',
        'pyyaml',
        'requests',
        'tqdm',
    ],
    extras_require={
        'test': ['pytest'],
    },
    python_requires=">=3.8",
    package_data={
        'motion_synth': [
            'data/*.tsv',
            'data/prompts/*.txt',
            'data/fixtures/*.json',
            'data/configs/*.yaml',
        ],
    }
)
