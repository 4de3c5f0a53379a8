#!/usr/bin/env python3
from setuptools import setup, find_packages
import subprocess

# Use tag as version, *if* it is a tagged commit...
r = subprocess.run(['git', 'tag', '--points-at=HEAD'], stdout=subprocess.PIPE, stderr=subprocess.DEVNULL)
version = r.stdout.rstrip().decode('UTF-8')

# ...otherwise, use abbreviated git commit hash
if version == '':
    r = subprocess.run(['git', 'rev-parse', '--short=8', 'HEAD'], stdout=subprocess.PIPE, stderr=subprocess.DEVNULL)
    version = '0.1.dev+' + r.stdout.rstrip().decode('UTF-8') if r.returncode == 0 else '0.1.dev0'

setup(
    name='msfreg',
    version=version,
    description='Unsupervised multi-scale fusion network for deformable 3D image registration.',
    license='Mozilla Public License v2',
    packages=find_packages(exclude=('tests', 'tests.*')),
    scripts=['regctl.py'],
    python_requires='>=3.9',
    install_requires=['torch>=1.13', 'numpy>=1.21', 'scipy>=1.7', 'nibabel>=3.2', 'matplotlib>=3.5',
                      'pyyaml>=5.1', 'tqdm>=4.60'],
    tests_require=['pytest>=2.7.2', 'hypothesis>=6.0'],
    package_data={'msfreg': [
        'config.yaml'
    ]},
)
