import datetime

from setuptools import setup, find_packages

setup_args = {
    "name": "v2x-stack",
    "version": datetime.datetime.now().strftime("%Y.%m.%d"),
    "packages": find_packages(),
    "python_requires": ">=3.9",
    "install_requires": ["numpy", "scipy", "pandas", "python-dateutil"],
    "tests_require": ["pytest"],
    "entry_points": {"console_scripts": ["v2x_stack = v2x_stack.main:main"]},
    "package_data": {
        "v2x_stack": ["data/*.csv"],
    },
}

setup(**setup_args)
