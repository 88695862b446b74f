import os
import sys

# let test modules import the shared reference implementations in oracles.py
sys.path.insert(0, os.path.dirname(__file__))
