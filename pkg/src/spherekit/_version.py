"""Single source of the toolkit version string.

Kept in its own module so cli/io can stamp reports without importing the
package root.
"""

__version__ = "0.1.0"
