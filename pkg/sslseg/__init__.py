from sslseg.version import version, version_str
