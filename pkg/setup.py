#!/usr/bin/env python

from setuptools import setup

setup(name='ml-agcn',
      version='0.1.0',
      description='Adaptive graph convolutional networks for multi-label classification, with adversarial domain adaptation',
      author='ml-agcn developers',
      classifiers=['Programming Language :: Python :: 3 :: Only'],
      install_requires=[
          'singer-python==5.13.0',
          'numpy>=1.21',
          'tomli>=1.1; python_version<"3.11"',
      ],
      extras_require={
          'dev': [
              'ipdb',
              'pylint',
              'pytest',
          ]
      },
      entry_points='''
          [console_scripts]
          mlagcn=mlagcn:main
      ''',
      packages=['mlagcn'],
      package_data={
          'mlagcn': ['schemas/*.json', 'schemas/shared/*.json'],
      },
      include_package_data=True,
)
