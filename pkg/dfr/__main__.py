#!/usr/bin/env python3

import dfr.shell

dfr.shell.main()
