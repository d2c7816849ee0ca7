"""
Behavioral cloning workbench
"""
