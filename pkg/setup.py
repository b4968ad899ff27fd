from setuptools import find_packages, setup

import brwmf

setup(
    name='brwmf',
    version=brwmf.__version__,
    description='Branching random walk multifractal toolkit',
    packages=find_packages(exclude=['tests']),
    package_data={'brwmf': ['templates/*.j2']},
    python_requires='>=3.8',
    install_requires=[
        'Jinja2',
        'PyYAML',
        'ansible-core',
        'numpy',
        'scipy',
        'simplejson',
    ],
    extras_require={
        'test': ['pytest'],
    },
    entry_points={
        'console_scripts': ['brwmf=brwmf.cli:main'],
    },
)
