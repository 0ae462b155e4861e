"""
Test suite for loopguard.
"""
