"""Shared I/O helpers: CSV artifacts, the run registry and static plots"""
